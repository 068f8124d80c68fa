//! On-disk formats: control CSV with metadata sidecar, keypoint JSON,
//! library JSON, plan JSON, OGF1 guidance fields, preference manifests and
//! evaluation reports.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use gazekit_core::control::CHANNEL_COUNT;
use gazekit_core::guidance::GuidanceField;
use gazekit_core::library::{build_library, PrototypeLibrary, Record, LIBRARY_VERSION};
use gazekit_core::mapper::{
    KeypointFrame, KeypointSequence, KeypointSequence3D, Points3, LAYOUT_NAME, POINT_COUNT,
};
use gazekit_core::metrics::F1Score;
use gazekit_core::nalgebra::Vector3;
use gazekit_core::objectives::KtoBatch;
use gazekit_core::planner::{InitialPose, Plan};
use gazekit_core::{Channel, ControlSequence, ControlState};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

pub const META_VERSION: u32 = 1;
pub const OGF_MAGIC: &[u8; 4] = b"OGF1";

#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed library file: {0}")]
    MalformedLibrary(String),
    #[error("unsupported library version {found}, expected {expected}")]
    LibraryVersion { found: u32, expected: u32 },
    #[error("malformed control CSV: {0}")]
    Csv(String),
    #[error("malformed keypoint file: {0}")]
    Keypoints(String),
    #[error("malformed OGF1 file: {0}")]
    Field(String),
    #[error("{}: malformed JSON: {message}", path.display())]
    Json { path: PathBuf, message: String },
    #[error(transparent)]
    Core(#[from] gazekit_core::Error),
}

pub type Result<T, E = FormatError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(io_err(path))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| FormatError::Json {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| FormatError::Json {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    w.write_all(b"\n")
        .and_then(|_| w.flush())
        .map_err(io_err(path))
}

/// Sidecar for a control CSV. `label` is only read by library building.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlMeta {
    pub fps: f64,
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

pub fn csv_header() -> Vec<&'static str> {
    std::iter::once("frame")
        .chain(Channel::ALL.iter().map(|c| c.name()))
        .collect()
}

/// Rows are numbered from 1.
pub fn write_controls_csv<W: Write>(seq: &ControlSequence, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| FormatError::Csv(e.to_string());
    w.write_record(csv_header()).map_err(err)?;
    for (i, f) in seq.frames().iter().enumerate() {
        let mut row = vec![(i + 1).to_string()];
        row.extend(f.to_array().iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| FormatError::Csv(e.to_string()))
}

pub fn read_controls_csv<R: Read>(input: R, fps: f64) -> Result<ControlSequence> {
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(input);
    let header = r.headers().map_err(|e| FormatError::Csv(e.to_string()))?;
    if header.iter().collect::<Vec<_>>() != csv_header() {
        return Err(FormatError::Csv(format!(
            "expected header `{}`",
            csv_header().join(",")
        )));
    }
    let mut frames = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| FormatError::Csv(e.to_string()))?;
        let mut v = [0.0; CHANNEL_COUNT];
        for (j, slot) in v.iter_mut().enumerate() {
            let field = rec.get(j + 1).unwrap_or("");
            *slot = field.parse().map_err(|_| {
                FormatError::Csv(format!(
                    "row {}: bad value `{field}` for {}",
                    i + 1,
                    Channel::ALL[j].name()
                ))
            })?;
        }
        frames.push(ControlState::from_array(&v));
    }
    Ok(ControlSequence::new(frames, fps)?)
}

/// `controls.csv` → `controls.meta.json`.
pub fn meta_path(csv: &Path) -> PathBuf {
    csv.with_extension("meta.json")
}

pub fn save_controls(seq: &ControlSequence, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    write_controls_csv(seq, BufWriter::new(file))?;
    write_json(
        &meta_path(path),
        &ControlMeta {
            fps: seq.fps(),
            version: META_VERSION,
            label: None,
        },
    )
}

pub fn load_meta(path: &Path) -> Result<Option<ControlMeta>> {
    let meta = meta_path(path);
    if meta.exists() {
        Ok(Some(read_json(&meta)?))
    } else {
        Ok(None)
    }
}

/// Loads a control CSV, taking fps from its sidecar when present.
pub fn load_controls(path: &Path, default_fps: f64) -> Result<ControlSequence> {
    let fps = load_meta(path)?.map_or(default_fps, |m| m.fps);
    let file = File::open(path).map_err(io_err(path))?;
    read_controls_csv(BufReader::new(file), fps)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct KeypointFile {
    fps: f64,
    layout: String,
    frames: Vec<Vec<Vec<f64>>>,
}

/// Keypoints as stored: 2-D, or 3-D when depth was kept.
#[derive(Clone, Debug, PartialEq)]
pub enum Keypoints {
    Flat(KeypointSequence),
    Depth(KeypointSequence3D),
}

impl Keypoints {
    pub fn fps(&self) -> f64 {
        match self {
            Keypoints::Flat(k) => k.fps,
            Keypoints::Depth(k) => k.fps,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Keypoints::Flat(k) => k.frames.len(),
            Keypoints::Depth(k) => k.frames.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn keypoints_to_json(k: &Keypoints) -> serde_json::Value {
    let frames: Vec<Vec<Vec<f64>>> = match k {
        Keypoints::Flat(s) => s
            .frames
            .iter()
            .map(|f| f.points.iter().map(|p| p.to_vec()).collect())
            .collect(),
        Keypoints::Depth(s) => s
            .frames
            .iter()
            .map(|f| f.iter().map(|p| vec![p.x, p.y, p.z]).collect())
            .collect(),
    };
    serde_json::to_value(KeypointFile {
        fps: k.fps(),
        layout: LAYOUT_NAME.into(),
        frames,
    })
    .expect("keypoints serialize")
}

pub fn keypoints_from_json(value: serde_json::Value) -> Result<Keypoints> {
    let file: KeypointFile =
        serde_json::from_value(value).map_err(|e| FormatError::Keypoints(e.to_string()))?;
    if file.layout != LAYOUT_NAME {
        return Err(FormatError::Keypoints(format!(
            "unsupported layout `{}`, expected `{LAYOUT_NAME}`",
            file.layout
        )));
    }
    if file.frames.is_empty() {
        return Err(FormatError::Keypoints("no frames".into()));
    }
    let dim = file.frames[0].first().map_or(0, Vec::len);
    if dim != 2 && dim != 3 {
        return Err(FormatError::Keypoints(format!(
            "points must have 2 or 3 coordinates, found {dim}"
        )));
    }
    for (i, f) in file.frames.iter().enumerate() {
        if f.len() != POINT_COUNT {
            return Err(FormatError::Keypoints(format!(
                "frame {}: expected {POINT_COUNT} points, found {}",
                i + 1,
                f.len()
            )));
        }
        if f.iter()
            .any(|p| p.len() != dim || p.iter().any(|v| !v.is_finite()))
        {
            return Err(FormatError::Keypoints(format!(
                "frame {}: inconsistent or non-finite point",
                i + 1
            )));
        }
    }
    Ok(if dim == 2 {
        Keypoints::Flat(KeypointSequence {
            frames: file
                .frames
                .iter()
                .map(|f| {
                    let mut points = [[0.0; 2]; POINT_COUNT];
                    for (p, q) in points.iter_mut().zip(f) {
                        *p = [q[0], q[1]];
                    }
                    KeypointFrame { points }
                })
                .collect(),
            fps: file.fps,
        })
    } else {
        Keypoints::Depth(KeypointSequence3D {
            frames: file
                .frames
                .iter()
                .map(|f| {
                    let mut points: Points3 = [Vector3::zeros(); POINT_COUNT];
                    for (p, q) in points.iter_mut().zip(f) {
                        *p = Vector3::new(q[0], q[1], q[2]);
                    }
                    points
                })
                .collect(),
            fps: file.fps,
        })
    })
}

pub fn save_keypoints(k: &Keypoints, path: &Path) -> Result<()> {
    write_json(path, &keypoints_to_json(k))
}

pub fn load_keypoints(path: &Path) -> Result<Keypoints> {
    keypoints_from_json(read_json(path)?)
}

#[derive(Serialize, Deserialize)]
struct PrototypeEntry {
    label: String,
    fps: f64,
    controls: Vec<[f64; CHANNEL_COUNT]>,
    keypoints: Vec<Vec<[f64; 3]>>,
}

#[derive(Serialize, Deserialize)]
struct LibraryFile {
    version: u32,
    prototypes: Vec<PrototypeEntry>,
}

pub fn library_to_writer<W: Write>(lib: &PrototypeLibrary, out: W) -> Result<()> {
    let file = LibraryFile {
        version: lib.version,
        prototypes: lib
            .prototypes
            .iter()
            .map(|p| PrototypeEntry {
                label: p.label.clone(),
                fps: p.controls.fps(),
                controls: p.controls.frames().iter().map(|f| f.to_array()).collect(),
                keypoints: p
                    .keypoints
                    .frames
                    .iter()
                    .map(|f| f.iter().map(|v| [v.x, v.y, v.z]).collect())
                    .collect(),
            })
            .collect(),
    };
    serde_json::to_writer(out, &file).map_err(|e| FormatError::MalformedLibrary(e.to_string()))
}

/// Parses a library; summaries and the label index are rebuilt.
pub fn library_from_reader<R: Read>(input: R) -> Result<PrototypeLibrary> {
    let file: LibraryFile =
        serde_json::from_reader(input).map_err(|e| FormatError::MalformedLibrary(e.to_string()))?;
    if file.version != LIBRARY_VERSION {
        return Err(FormatError::LibraryVersion {
            found: file.version,
            expected: LIBRARY_VERSION,
        });
    }
    let mut records = Vec::with_capacity(file.prototypes.len());
    for (i, p) in file.prototypes.into_iter().enumerate() {
        let bad = |m: String| FormatError::MalformedLibrary(format!("prototype {i}: {m}"));
        let frames: Vec<ControlState> = p.controls.iter().map(ControlState::from_array).collect();
        let controls = ControlSequence::new(frames, p.fps).map_err(|e| bad(e.to_string()))?;
        let mut kf = Vec::with_capacity(p.keypoints.len());
        for f in &p.keypoints {
            if f.len() != POINT_COUNT {
                return Err(bad(format!(
                    "expected {POINT_COUNT} keypoints per frame, found {}",
                    f.len()
                )));
            }
            let mut points: Points3 = [Vector3::zeros(); POINT_COUNT];
            for (d, s) in points.iter_mut().zip(f) {
                *d = Vector3::new(s[0], s[1], s[2]);
            }
            kf.push(points);
        }
        records.push(Record {
            label: p.label,
            controls,
            keypoints: KeypointSequence3D {
                frames: kf,
                fps: p.fps,
            },
        });
    }
    build_library(records).map_err(|e| FormatError::MalformedLibrary(e.to_string()))
}

pub fn save_library(lib: &PrototypeLibrary, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    library_to_writer(lib, &mut w)?;
    w.flush().map_err(io_err(path))
}

pub fn load_library(path: &Path) -> Result<PrototypeLibrary> {
    let file = File::open(path).map_err(io_err(path))?;
    library_from_reader(BufReader::new(file))
}

/// A plan together with the request fields that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanEnvelope {
    #[serde(flatten)]
    pub plan: Plan,
    #[serde(default)]
    pub instructions: Option<String>,
    #[serde(default)]
    pub initial_pose: InitialPose,
}

/// Decoded OGF1 payload.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldStack {
    pub height: u32,
    pub width: u32,
    pub rhos: Vec<f32>,
    pub steps: Vec<Vec<f32>>,
}

pub fn write_ogf<W: Write>(fields: &[GuidanceField], mut out: W) -> std::io::Result<()> {
    let (h, w) = fields
        .first()
        .map_or((0, 0), |f| (f.grid.height, f.grid.width));
    out.write_all(OGF_MAGIC)?;
    for v in [h as u32, w as u32, fields.len() as u32] {
        out.write_all(&v.to_le_bytes())?;
    }
    for f in fields {
        out.write_all(&(f.rho as f32).to_le_bytes())?;
    }
    for f in fields {
        for v in &f.grid.values {
            out.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    out.flush()
}

pub fn read_ogf(bytes: &[u8]) -> Result<FieldStack> {
    let bad = |m: &str| FormatError::Field(m.into());
    if bytes.len() < 16 || &bytes[..4] != OGF_MAGIC {
        return Err(bad("missing OGF1 header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("four bytes"));
    let (height, width, n) = (word(4), word(8), word(12) as usize);
    let cells = height as usize * width as usize;
    let expected = 16 + 4 * n + 4 * n * cells;
    if bytes.len() != expected {
        return Err(FormatError::Field(format!(
            "expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let float = |i: usize| f32::from_le_bytes(bytes[i..i + 4].try_into().expect("four bytes"));
    let rhos = (0..n).map(|k| float(16 + 4 * k)).collect();
    let base = 16 + 4 * n;
    let steps = (0..n)
        .map(|k| {
            (0..cells)
                .map(|c| float(base + 4 * (k * cells + c)))
                .collect()
        })
        .collect();
    Ok(FieldStack {
        height,
        width,
        rhos,
        steps,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KtoEntry {
    pub id: String,
    pub desirable: bool,
    pub log_ratio: f64,
}

/// Preference manifest as a batch with default `beta` and weights.
pub fn kto_batch(entries: &[KtoEntry]) -> KtoBatch {
    KtoBatch::new(
        entries.iter().map(|e| e.log_ratio).collect(),
        entries.iter().map(|e| e.desirable).collect(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub au_f1: Option<F1Score>,
    pub au_temp: Option<f64>,
    pub eye_lmd: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use gazekit_core::demo::demo_library;

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let f = ControlState::zero()
            .with(Channel::Au1, 0.1 + 0.2)
            .with(Channel::Yaw, -12.345678901234567);
        let seq = ControlSequence::new(vec![f, ControlState::zero()], 30.0).unwrap();
        let mut buf = Vec::new();
        write_controls_csv(&seq, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("frame,AU1,AU2_L,AU2_R,AU4_L,AU4_R,AU5_L,AU5_R,AU7,AU43_L,AU43_R,gaze_left,gaze_right,gaze_up,gaze_down,yaw,pitch,roll\n1,"));
        assert_eq!(read_controls_csv(&buf[..], 30.0).unwrap(), seq);
    }

    #[test]
    fn csv_rejects_bad_header() {
        assert!(matches!(
            read_controls_csv(&b"frame,AU1\n1,0\n"[..], 25.0),
            Err(FormatError::Csv(_))
        ));
    }

    #[test]
    fn library_round_trip_and_truncation() {
        let lib = demo_library().unwrap();
        let mut buf = Vec::new();
        library_to_writer(&lib, &mut buf).unwrap();
        assert_eq!(library_from_reader(&buf[..]).unwrap(), lib);
        let err = library_from_reader(&buf[..buf.len() / 2]).unwrap_err();
        assert!(
            err.to_string().starts_with("malformed library file"),
            "{err}"
        );
        let empty = build_library(Vec::new()).unwrap();
        let mut buf = Vec::new();
        library_to_writer(&empty, &mut buf).unwrap();
        assert!(library_from_reader(&buf[..]).unwrap().is_empty());
    }

    #[test]
    fn library_version_is_checked() {
        let err = library_from_reader(&br#"{"version":7,"prototypes":[]}"#[..]).unwrap_err();
        assert!(matches!(err, FormatError::LibraryVersion { found: 7, .. }));
    }

    #[test]
    fn ogf_layout() {
        use gazekit_core::guidance::{guidance_schedule, EyeGeometry, GuidanceParams};
        let p = GuidanceParams {
            steps: 3,
            ..Default::default()
        };
        let fields =
            guidance_schedule((2, 3), &EyeGeometry::new([1.0, 1.0], 1.0).unwrap(), &p).unwrap();
        let mut buf = Vec::new();
        write_ogf(&fields, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"OGF1");
        assert_eq!(buf.len(), 16 + 4 * 3 + 4 * 3 * 6);
        let back = read_ogf(&buf).unwrap();
        assert_eq!((back.height, back.width), (2, 3));
        assert_eq!(back.rhos, vec![0.0, 1.0 / 3.0, 2.0 / 3.0]);
        assert_eq!(back.steps[0][4], 8.0);
        assert!(read_ogf(&buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn keypoint_layout_is_checked() {
        let v = serde_json::json!({"fps": 25.0, "layout": "other", "frames": [[[0.0, 0.0]]]});
        assert!(matches!(
            keypoints_from_json(v),
            Err(FormatError::Keypoints(_))
        ));
    }

    #[test]
    fn plan_schema_keys() {
        use gazekit_core::planner::{plan, PlanRequest, TemplateTable};
        let req = PlanRequest {
            label: "drowsiness",
            total_frames: 50,
            fps: 25.0,
            instructions: None,
            initial_pose: InitialPose::default(),
        };
        let p = plan(&req, &TemplateTable::default()).unwrap();
        let v = serde_json::to_value(PlanEnvelope {
            plan: p.clone(),
            instructions: Some("blink".into()),
            initial_pose: InitialPose::default(),
        })
        .unwrap();
        for key in [
            "label",
            "fps",
            "total_frames",
            "events",
            "instructions",
            "initial_pose",
        ] {
            assert!(v.get(key).is_some(), "{key}");
        }
        let e = &v["events"][1];
        assert_eq!(e["start_frame"], 7);
        assert_eq!(
            e["channel_targets"]["AU43_L"],
            serde_json::json!([0.3, 1.0])
        );
        assert_eq!(e["exemptions"], serde_json::json!(["blink_duration"]));
        let back: PlanEnvelope = serde_json::from_value(v).unwrap();
        assert_eq!(back.plan, p);
    }

    #[test]
    fn kto_manifest_parses() {
        let entries: Vec<KtoEntry> =
            serde_json::from_str(r#"[{"id":"a","desirable":true,"log_ratio":0.0}]"#).unwrap();
        let b = kto_batch(&entries);
        assert!((gazekit_core::objectives::kto_loss(&b).unwrap() - 0.5).abs() < 1e-12);
    }
}
