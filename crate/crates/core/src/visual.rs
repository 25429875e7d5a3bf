//! Precomputed visual features: one image embedding plus a fixed number of
//! object slots per sample.
//!
//! Two on-disk forms are accepted.
//!
//! JSON lines, one record per line:
//!
//! ```text
//! {"id": "s1", "image_feat": [f32...], "objects": [{"feat": [f32...], "box": [cx, cy, w, h]}]}
//! ```
//!
//! `box` is optional. An object may carry `"mask": false` to mark an explicit
//! padding slot, whose `feat` must then be all zeros. Missing slots up to
//! `n_obj` are zero-padded on load.
//!
//! Packed little-endian binary:
//!
//! ```text
//! "OOCF"  u32 version(=1)  u32 d_vis  u32 n_obj
//! repeated until EOF:
//!   u32 id_len, id bytes (UTF-8)
//!   f32 × d_vis                     image embedding
//!   n_obj × { u8 flags, f32 × d_vis feat, f32 × 4 box }
//!                                   flags bit 0 = real object, bit 1 = box present
//! ```

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const BINARY_MAGIC: &[u8; 4] = b"OOCF";
pub const BINARY_VERSION: u32 = 1;
pub const DEFAULT_D_VIS: usize = 1024;
pub const DEFAULT_N_OBJ: usize = 10;

/// Feature bundle of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualRecord {
    pub sample_id: String,
    pub image_feat: Vec<f64>,
    /// `n_obj × d_vis`; rows of padded slots are zero.
    pub object_feats: Tensor,
    pub object_mask: Vec<bool>,
    /// Per-slot `(cx, cy, w, h)`, zero for padded slots.
    pub boxes: Option<Vec<[f64; 4]>>,
}

impl VisualRecord {
    pub fn d_vis(&self) -> usize {
        self.image_feat.len()
    }

    pub fn n_obj(&self) -> usize {
        self.object_mask.len()
    }

    pub fn real_objects(&self) -> usize {
        self.object_mask.iter().filter(|&&m| m).count()
    }

    /// Checks dimensions, finiteness, box range and the zero-padding rule.
    pub fn validate(&self, d_vis: usize, n_obj: usize) -> Result<()> {
        let schema = |message: String| Error::Schema {
            id: self.sample_id.clone(),
            message,
        };
        if self.image_feat.len() != d_vis {
            return Err(schema(format!(
                "image_feat has {} values, expected {d_vis}",
                self.image_feat.len()
            )));
        }
        if self.object_feats.shape() != [n_obj, d_vis] || self.object_mask.len() != n_obj {
            return Err(schema(format!(
                "object block is {:?} with {} mask flags, expected [{n_obj}, {d_vis}]",
                self.object_feats.shape(),
                self.object_mask.len()
            )));
        }
        if !self.image_feat.iter().all(|v| v.is_finite()) || !self.object_feats.is_finite() {
            return Err(Error::Data {
                id: self.sample_id.clone(),
                message: "non-finite feature value".into(),
            });
        }
        for (slot, &real) in self.object_mask.iter().enumerate() {
            if !real && self.object_feats.row(slot).iter().any(|&v| v != 0.0) {
                return Err(schema(format!("padded object slot {slot} is not all zeros")));
            }
        }
        if let Some(boxes) = &self.boxes {
            if boxes.len() != n_obj {
                return Err(schema(format!("{} boxes for {n_obj} slots", boxes.len())));
            }
            if boxes.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(schema("box coordinate outside [0, 1]".into()));
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct JsonObject {
    feat: Vec<f32>,
    #[serde(rename = "box", default, skip_serializing_if = "Option::is_none")]
    bbox: Option<[f32; 4]>,
    #[serde(default = "default_true", skip_serializing_if = "is_true")]
    mask: bool,
}

fn default_true() -> bool {
    true
}

fn is_true(v: &bool) -> bool {
    *v
}

#[derive(Serialize, Deserialize)]
struct JsonRecord {
    id: String,
    image_feat: Vec<f32>,
    #[serde(default)]
    objects: Vec<JsonObject>,
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| f64::from(x)).collect()
}

fn record_from_json(rec: JsonRecord, n_obj: usize) -> Result<VisualRecord> {
    let d_vis = rec.image_feat.len();
    if rec.objects.len() > n_obj {
        return Err(Error::Schema {
            id: rec.id,
            message: format!("{} objects exceed the limit of {n_obj}", rec.objects.len()),
        });
    }
    let mut feats = Tensor::zeros(&[n_obj, d_vis]);
    let mut mask = vec![false; n_obj];
    let any_box = rec.objects.iter().any(|o| o.bbox.is_some());
    let mut boxes = vec![[0.0; 4]; n_obj];
    for (slot, obj) in rec.objects.iter().enumerate() {
        if obj.feat.len() != d_vis {
            return Err(Error::Schema {
                id: rec.id.clone(),
                message: format!(
                    "object {slot} has {} values, image_feat has {d_vis}",
                    obj.feat.len()
                ),
            });
        }
        feats.row_mut(slot).copy_from_slice(&widen(&obj.feat));
        mask[slot] = obj.mask;
        if let Some(b) = obj.bbox {
            boxes[slot] = b.map(f64::from);
        }
    }
    Ok(VisualRecord {
        sample_id: rec.id,
        image_feat: widen(&rec.image_feat),
        object_feats: feats,
        object_mask: mask,
        boxes: any_box.then_some(boxes),
    })
}

/// Loads a feature file in either format. Every record must share the
/// embedding width of the first one; `n_obj` fixes the slot count.
pub fn load_features(path: impl AsRef<Path>, n_obj: usize) -> Result<Vec<VisualRecord>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(BINARY_MAGIC) {
        return decode_binary(&bytes, n_obj);
    }
    let text = String::from_utf8(bytes).map_err(|e| Error::Parse {
        path: path.display().to_string(),
        line: 0,
        message: format!("not UTF-8 and not a packed feature file: {e}"),
    })?;
    parse_features_jsonl(&text, &path.display().to_string(), n_obj)
}

pub fn parse_features_jsonl(text: &str, origin: &str, n_obj: usize) -> Result<Vec<VisualRecord>> {
    let mut out: Vec<VisualRecord> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let raw: JsonRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: origin.to_string(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        let rec = record_from_json(raw, n_obj)?;
        let d_vis = out.first().map_or(rec.d_vis(), VisualRecord::d_vis);
        rec.validate(d_vis, n_obj)?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_features_jsonl(path: impl AsRef<Path>, records: &[VisualRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in records {
        let objects = (0..r.n_obj())
            .filter(|&s| r.object_mask[s])
            .map(|s| JsonObject {
                feat: r.object_feats.row(s).iter().map(|&v| v as f32).collect(),
                bbox: r.boxes.as_ref().map(|b| b[s].map(|v| v as f32)),
                mask: true,
            })
            .collect();
        let rec = JsonRecord {
            id: r.sample_id.clone(),
            image_feat: r.image_feat.iter().map(|&v| v as f32).collect(),
            objects,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn encode_binary(records: &[VisualRecord]) -> Result<Vec<u8>> {
    let d_vis = records.first().map_or(0, VisualRecord::d_vis);
    let n_obj = records.first().map_or(0, VisualRecord::n_obj);
    let mut out = Vec::new();
    out.extend_from_slice(BINARY_MAGIC);
    for v in [BINARY_VERSION, d_vis as u32, n_obj as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for r in records {
        r.validate(d_vis, n_obj)?;
        out.extend_from_slice(&(r.sample_id.len() as u32).to_le_bytes());
        out.extend_from_slice(r.sample_id.as_bytes());
        for &v in &r.image_feat {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for slot in 0..n_obj {
            let mut flags = u8::from(r.object_mask[slot]);
            if r.boxes.is_some() {
                flags |= 2;
            }
            out.push(flags);
            for &v in r.object_feats.row(slot) {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
            let b = r.boxes.as_ref().map_or([0.0; 4], |b| b[slot]);
            for v in b {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse {
                path: "<packed features>".into(),
                line: 0,
                message: format!("truncated while reading {what} at byte {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        Ok(self
            .take(4 * n, what)?
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect())
    }
}

pub fn decode_binary(bytes: &[u8], n_obj: usize) -> Result<Vec<VisualRecord>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != BINARY_MAGIC {
        return Err(Error::Input("missing OOCF magic".into()));
    }
    let version = r.u32("version")?;
    if version != BINARY_VERSION {
        return Err(Error::Input(format!("unsupported packed feature version {version}")));
    }
    let d_vis = r.u32("d_vis")? as usize;
    let file_n_obj = r.u32("n_obj")? as usize;
    if file_n_obj != n_obj {
        return Err(Error::Input(format!(
            "packed file has {file_n_obj} object slots, expected {n_obj}"
        )));
    }
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let id_len = r.u32("id length")? as usize;
        let id = String::from_utf8(r.take(id_len, "id")?.to_vec())
            .map_err(|_| Error::Input("record id is not UTF-8".into()))?;
        let image_feat = r.f32s(d_vis, "image_feat")?;
        let mut feats = Tensor::zeros(&[n_obj, d_vis]);
        let mut mask = vec![false; n_obj];
        let mut boxes = vec![[0.0; 4]; n_obj];
        let mut has_boxes = false;
        for slot in 0..n_obj {
            let flags = r.take(1, "flags")?[0];
            mask[slot] = flags & 1 != 0;
            has_boxes |= flags & 2 != 0;
            feats.row_mut(slot).copy_from_slice(&r.f32s(d_vis, "object feat")?);
            let b = r.f32s(4, "box")?;
            boxes[slot] = [b[0], b[1], b[2], b[3]];
        }
        let rec = VisualRecord {
            sample_id: id,
            image_feat,
            object_feats: feats,
            object_mask: mask,
            boxes: has_boxes.then_some(boxes),
        };
        rec.validate(d_vis, n_obj)?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_features_binary(path: impl AsRef<Path>, records: &[VisualRecord]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_binary(records)?).map_err(|e| Error::io(path, e))
}

fn unit_gaussian<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Deterministic random unit-norm features. The number of real objects per
/// sample is uniform in `obj_range` (clamped to `n_obj`).
pub fn synth_features(
    seed: u64,
    n_samples: usize,
    obj_range: (usize, usize),
    d_vis: usize,
    n_obj: usize,
) -> Vec<VisualRecord> {
    assert!(d_vis >= 1, "d_vis must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lo, hi) = (obj_range.0.min(n_obj), obj_range.1.min(n_obj));
    (0..n_samples)
        .map(|i| {
            let image_feat = unit_gaussian(&mut rng, d_vis);
            let count = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
            let mut feats = Tensor::zeros(&[n_obj, d_vis]);
            let mut boxes = vec![[0.0; 4]; n_obj];
            for slot in 0..count {
                feats.row_mut(slot).copy_from_slice(&unit_gaussian(&mut rng, d_vis));
                let (w, h) = (rng.gen_range(0.05..0.5), rng.gen_range(0.05..0.5));
                boxes[slot] = [
                    rng.gen_range(w / 2.0..1.0 - w / 2.0),
                    rng.gen_range(h / 2.0..1.0 - h / 2.0),
                    w,
                    h,
                ];
            }
            VisualRecord {
                sample_id: format!("synth-{i:05}"),
                image_feat,
                object_feats: feats,
                object_mask: (0..n_obj).map(|s| s < count).collect(),
                boxes: Some(boxes),
            }
        })
        .collect()
}
