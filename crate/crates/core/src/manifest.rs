//! Corpus data model and on-disk formats.
//!
//! A manifest is UTF-8 JSON Lines: one [`SegmentRecord`] object per line, with
//! optional fields omitted when absent. Dense vectors (encoder outputs,
//! x-vectors) live in a separate little-endian binary store:
//!
//! ```text
//! offset 0   magic  b"CNVEC1\0\0"
//! offset 8   count  u32 LE
//! offset 12  dim    u32 LE
//! offset 16  count * dim f32 LE, row-major
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const VECTOR_MAGIC: &[u8; 8] = b"CNVEC1\0\0";
const VECTOR_HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: parse error: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: duplicate id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: schema violation in field `{field}`: {reason}")]
    Schema {
        line: usize,
        field: &'static str,
        reason: String,
    },
    #[error("record {id:?}: {kind} reference {reference} does not resolve: {reason}")]
    UnresolvedRef {
        id: String,
        kind: &'static str,
        reference: VecRef,
        reason: String,
    },
}

#[derive(Debug, Error)]
pub enum VectorStoreError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("truncated payload: expected {expected} bytes of data, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("trailing bytes after payload: {0}")]
    TrailingBytes(usize),
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
    #[error("schema violation: {0}")]
    Schema(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gender {
    Male,
    Female,
    Nonbinary,
    NotIndicated,
}

impl Gender {
    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Male => "male",
            Gender::Female => "female",
            Gender::Nonbinary => "nonbinary",
            Gender::NotIndicated => "not_indicated",
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Reference to one row of a named [`VectorStore`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VecRef {
    pub store: String,
    pub row: u32,
}

impl fmt::Display for VecRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}]", self.store, self.row)
    }
}

/// One speech segment.
///
/// External model outputs (volume, NISQA MOS, MLM score) are optional so that
/// a partially scored manifest can still be loaded; the quality filters reject
/// records that lack them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub id: String,
    pub channel_id: String,
    pub duration_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub volume_dbfs: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nisqa_mos: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlm_score: Option<f64>,
    #[serde(default)]
    pub transcription: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mora_count: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gender_label: Option<Gender>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audio_vec_ref: Option<VecRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_vec_ref: Option<VecRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xvector_ref: Option<VecRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wav_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f0_mean_hz: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy_std: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaking_rate: Option<f64>,
}

impl SegmentRecord {
    /// Minimal record with only the mandatory fields set.
    pub fn new(id: impl Into<String>, channel_id: impl Into<String>, duration_s: f64) -> Self {
        Self {
            id: id.into(),
            channel_id: channel_id.into(),
            duration_s,
            volume_dbfs: None,
            nisqa_mos: None,
            mlm_score: None,
            transcription: String::new(),
            description: None,
            mora_count: None,
            gender_label: None,
            audio_vec_ref: None,
            text_vec_ref: None,
            xvector_ref: None,
            wav_ref: None,
            f0_mean_hz: None,
            energy_std: None,
            speaking_rate: None,
        }
    }

    /// Checks the per-record schema invariants. Returns the offending field.
    pub fn validate(&self) -> Result<(), (&'static str, String)> {
        if self.id.is_empty() {
            return Err(("id", "must be non-empty".into()));
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err((
                "duration_s",
                format!("must be > 0, got {}", self.duration_s),
            ));
        }
        if let Some(mos) = self.nisqa_mos {
            if !(1.0..=5.0).contains(&mos) {
                return Err(("nisqa_mos", format!("must lie in [1, 5], got {mos}")));
            }
        }
        let finite = [
            ("volume_dbfs", self.volume_dbfs),
            ("mlm_score", self.mlm_score),
            ("f0_mean_hz", self.f0_mean_hz),
            ("energy_std", self.energy_std),
            ("speaking_rate", self.speaking_rate),
        ];
        for (field, value) in finite {
            if let Some(v) = value {
                if !v.is_finite() {
                    return Err((field, "must be finite".into()));
                }
            }
        }
        Ok(())
    }
}

/// Parses a manifest from any buffered reader. Line numbers are 1-based;
/// blank lines are skipped.
pub fn parse_manifest<R: BufRead>(reader: R) -> Result<Vec<SegmentRecord>, ManifestError> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: SegmentRecord =
            serde_json::from_str(&line).map_err(|e| ManifestError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
        record
            .validate()
            .map_err(|(field, reason)| ManifestError::Schema {
                line: line_no,
                field,
                reason,
            })?;
        if !seen.insert(record.id.clone()) {
            return Err(ManifestError::DuplicateId {
                line: line_no,
                id: record.id,
            });
        }
        records.push(record);
    }
    Ok(records)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<SegmentRecord>, ManifestError> {
    let file = fs::File::open(path)?;
    parse_manifest(BufReader::new(file))
}

/// Serializes records as JSON Lines, one trailing newline per record.
pub fn manifest_to_string(records: &[SegmentRecord]) -> String {
    let mut out = String::new();
    for r in records {
        // SegmentRecord contains only strings, numbers and enums.
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn save_manifest(records: &[SegmentRecord], path: impl AsRef<Path>) -> io::Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(manifest_to_string(records).as_bytes())?;
    f.sync_all()
}

/// Dense row-major matrix of 32-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorStore {
    dim: usize,
    count: usize,
    data: Vec<f32>,
}

impl VectorStore {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self, VectorStoreError> {
        if dim == 0 {
            return Err(VectorStoreError::Schema("dim must be positive".into()));
        }
        if data.len() % dim != 0 {
            return Err(VectorStoreError::Schema(format!(
                "data length {} is not a multiple of dim {dim}",
                data.len()
            )));
        }
        if data.len() / dim > u32::MAX as usize || dim > u32::MAX as usize {
            return Err(VectorStoreError::Schema(
                "store exceeds u32 header range".into(),
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(VectorStoreError::NonFinite {
                row: pos / dim,
                col: pos % dim,
            });
        }
        Ok(Self {
            dim,
            count: data.len() / dim,
            data,
        })
    }

    pub fn from_rows<I, R>(dim: usize, rows: I) -> Result<Self, VectorStoreError>
    where
        I: IntoIterator<Item = R>,
        R: AsRef<[f32]>,
    {
        let mut data = Vec::new();
        for (i, row) in rows.into_iter().enumerate() {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(VectorStoreError::Schema(format!(
                    "row {i} has length {}, expected {dim}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Self::new(dim, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> Option<&[f32]> {
        (i < self.count).then(|| &self.data[i * self.dim..(i + 1) * self.dim])
    }

    /// Row widened to f64.
    pub fn row_f64(&self, i: usize) -> Option<Vec<f64>> {
        self.row(i).map(|r| r.iter().map(|&v| v as f64).collect())
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(VECTOR_HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(VECTOR_MAGIC);
        out.extend_from_slice(&(self.count as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, VectorStoreError> {
        if bytes.len() < 8 || &bytes[..8] != VECTOR_MAGIC {
            return Err(VectorStoreError::BadMagic);
        }
        if bytes.len() < VECTOR_HEADER_LEN {
            return Err(VectorStoreError::Truncated {
                expected: VECTOR_HEADER_LEN,
                found: bytes.len(),
            });
        }
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        if dim == 0 {
            return Err(VectorStoreError::Schema("dim must be positive".into()));
        }
        let payload = &bytes[VECTOR_HEADER_LEN..];
        let expected = count
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| VectorStoreError::Schema("count * dim overflows".into()))?;
        if payload.len() < expected {
            return Err(VectorStoreError::Truncated {
                expected,
                found: payload.len(),
            });
        }
        if payload.len() > expected {
            return Err(VectorStoreError::TrailingBytes(payload.len() - expected));
        }
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(dim, data)
    }
}

pub fn read_vectors(path: impl AsRef<Path>) -> Result<VectorStore, VectorStoreError> {
    VectorStore::from_bytes(&fs::read(path)?)
}

pub fn write_vectors(store: &VectorStore, path: impl AsRef<Path>) -> Result<(), VectorStoreError> {
    // VectorStore can only be built through `new`, so the data is already finite.
    let mut f = fs::File::create(path)?;
    f.write_all(&store.to_bytes())?;
    f.sync_all()?;
    Ok(())
}

/// Which vector reference of a record to resolve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RefKind {
    Audio,
    Text,
    XVector,
}

impl RefKind {
    pub fn name(self) -> &'static str {
        match self {
            RefKind::Audio => "audio_vec_ref",
            RefKind::Text => "text_vec_ref",
            RefKind::XVector => "xvector_ref",
        }
    }

    pub fn get(self, record: &SegmentRecord) -> Option<&VecRef> {
        match self {
            RefKind::Audio => record.audio_vec_ref.as_ref(),
            RefKind::Text => record.text_vec_ref.as_ref(),
            RefKind::XVector => record.xvector_ref.as_ref(),
        }
    }
}

/// Named vector stores that manifest references resolve against.
#[derive(Debug, Default, Clone)]
pub struct StoreSet {
    stores: BTreeMap<String, VectorStore>,
}

impl StoreSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: impl Into<String>, store: VectorStore) {
        self.stores.insert(id.into(), store);
    }

    pub fn get(&self, id: &str) -> Option<&VectorStore> {
        self.stores.get(id)
    }

    fn resolve_ref<'a>(
        &'a self,
        record: &SegmentRecord,
        kind: RefKind,
        r: &VecRef,
    ) -> Result<&'a [f32], ManifestError> {
        let unresolved = |reason: String| ManifestError::UnresolvedRef {
            id: record.id.clone(),
            kind: kind.name(),
            reference: r.clone(),
            reason,
        };
        let store = self
            .stores
            .get(&r.store)
            .ok_or_else(|| unresolved("unknown store".into()))?;
        store
            .row(r.row as usize)
            .ok_or_else(|| unresolved(format!("row out of range (store has {})", store.count())))
    }

    /// Resolves one reference of `record`. A missing reference is an error.
    pub fn resolve(&self, record: &SegmentRecord, kind: RefKind) -> Result<&[f32], ManifestError> {
        let r = kind
            .get(record)
            .ok_or_else(|| ManifestError::UnresolvedRef {
                id: record.id.clone(),
                kind: kind.name(),
                reference: VecRef {
                    store: String::new(),
                    row: 0,
                },
                reason: "reference absent".into(),
            })?;
        self.resolve_ref(record, kind, r)
    }

    /// Checks that every present reference of every record is in range.
    pub fn validate(&self, records: &[SegmentRecord]) -> Result<(), ManifestError> {
        for record in records {
            for kind in [RefKind::Audio, RefKind::Text, RefKind::XVector] {
                if let Some(r) = kind.get(record) {
                    self.resolve_ref(record, kind, r)?;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line(id: &str, dur: f64) -> String {
        format!(r#"{{"id":"{id}","channel_id":"c","duration_s":{dur},"transcription":"t"}}"#)
    }

    #[test]
    fn empty_manifest_is_empty() {
        assert!(parse_manifest("".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn order_is_preserved() {
        let text = [line("b", 1.0), line("a", 2.0), line("c", 3.0)].join("\n");
        let recs = parse_manifest(text.as_bytes()).unwrap();
        let ids: Vec<_> = recs.iter().map(|r| r.id.as_str()).collect();
        assert_eq!(ids, ["b", "a", "c"]);
    }

    #[test]
    fn negative_duration_names_field_and_line() {
        let text = [line("a", 1.0), line("b", -1.0)].join("\n");
        match parse_manifest(text.as_bytes()) {
            Err(ManifestError::Schema { line, field, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(field, "duration_s");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let text = [line("a", 1.0), line("a", 2.0)].join("\n");
        assert!(matches!(
            parse_manifest(text.as_bytes()),
            Err(ManifestError::DuplicateId { line: 2, .. })
        ));
    }

    #[test]
    fn malformed_json_reports_line() {
        let text = format!("{}\n{{not json", line("a", 1.0));
        assert!(matches!(
            parse_manifest(text.as_bytes()),
            Err(ManifestError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn mos_out_of_range_is_schema_violation() {
        let text = r#"{"id":"a","channel_id":"c","duration_s":3,"nisqa_mos":5.5}"#;
        assert!(matches!(
            parse_manifest(text.as_bytes()),
            Err(ManifestError::Schema {
                field: "nisqa_mos",
                ..
            })
        ));
    }

    #[test]
    fn vector_file_sizes() {
        let one = VectorStore::new(2, vec![1.0, 2.0]).unwrap();
        assert_eq!(one.to_bytes().len(), 8 + 8 + 8);
        let empty = VectorStore::new(4, vec![]).unwrap();
        assert_eq!(empty.to_bytes().len(), 16);
    }

    #[test]
    fn truncated_store_rejected() {
        let mut bytes = Vec::from(&VECTOR_MAGIC[..]);
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&3u32.to_le_bytes());
        for v in [1.0f32, 2.0, 3.0, 4.0, 5.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        assert!(matches!(
            VectorStore::from_bytes(&bytes),
            Err(VectorStoreError::Truncated {
                expected: 24,
                found: 20
            })
        ));
    }

    #[test]
    fn zero_dim_rejected() {
        let mut bytes = Vec::from(&VECTOR_MAGIC[..]);
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        assert!(matches!(
            VectorStore::from_bytes(&bytes),
            Err(VectorStoreError::Schema(_))
        ));
        assert!(VectorStore::new(0, vec![]).is_err());
    }

    #[test]
    fn bad_magic_and_non_finite() {
        assert!(matches!(
            VectorStore::from_bytes(b"CNVEC2\0\0\0\0\0\0\0\0\0\0"),
            Err(VectorStoreError::BadMagic)
        ));
        assert!(matches!(
            VectorStore::new(2, vec![0.0, f32::NAN]),
            Err(VectorStoreError::NonFinite { row: 0, col: 1 })
        ));
        let mut bytes = VectorStore::new(1, vec![1.0]).unwrap().to_bytes();
        bytes[16..20].copy_from_slice(&f32::INFINITY.to_le_bytes());
        assert!(matches!(
            VectorStore::from_bytes(&bytes),
            Err(VectorStoreError::NonFinite { .. })
        ));
    }

    #[test]
    fn store_set_validates_ranges() {
        let mut stores = StoreSet::new();
        stores.insert("hubert", VectorStore::new(2, vec![0.0; 4]).unwrap());
        let mut rec = SegmentRecord::new("a", "c", 3.0);
        rec.audio_vec_ref = Some(VecRef {
            store: "hubert".into(),
            row: 1,
        });
        assert!(stores.validate(std::slice::from_ref(&rec)).is_ok());
        rec.audio_vec_ref.as_mut().unwrap().row = 2;
        assert!(stores.validate(std::slice::from_ref(&rec)).is_err());
        rec.audio_vec_ref.as_mut().unwrap().store = "roberta".into();
        assert!(stores.validate(std::slice::from_ref(&rec)).is_err());
    }

    fn arb_record() -> impl Strategy<Value = SegmentRecord> {
        (
            "[a-z0-9]{1,8}",
            "[a-z]{1,4}",
            1e-3f64..1e3,
            proptest::option::of(-90.0f64..0.0),
            proptest::option::of(1.0f64..=5.0),
            proptest::option::of(-20.0f64..1.0),
            ".{0,12}",
            proptest::option::of(".{0,12}"),
            proptest::option::of(0u32..200),
            proptest::option::of(prop_oneof![
                Just(Gender::Male),
                Just(Gender::Female),
                Just(Gender::Nonbinary),
                Just(Gender::NotIndicated)
            ]),
            proptest::option::of(0u32..100),
        )
            .prop_map(
                |(id, ch, dur, vol, mos, mlm, tr, desc, mora, gender, row)| {
                    let mut r = SegmentRecord::new(id, ch, dur);
                    r.volume_dbfs = vol;
                    r.nisqa_mos = mos;
                    r.mlm_score = mlm;
                    r.transcription = tr;
                    r.description = desc;
                    r.mora_count = mora;
                    r.gender_label = gender;
                    r.audio_vec_ref = row.map(|row| VecRef {
                        store: "a".into(),
                        row,
                    });
                    r
                },
            )
    }

    proptest! {
        #[test]
        fn manifest_round_trip(rec in arb_record()) {
            let text = manifest_to_string(std::slice::from_ref(&rec));
            let back = parse_manifest(text.as_bytes()).unwrap();
            prop_assert_eq!(back, vec![rec]);
        }

        #[test]
        fn vector_round_trip_is_bit_exact(
            dim in 1usize..8,
            values in proptest::collection::vec(-1e30f32..1e30, 0..64),
        ) {
            let n = values.len() / dim * dim;
            let store = VectorStore::new(dim, values[..n].to_vec()).unwrap();
            let back = VectorStore::from_bytes(&store.to_bytes()).unwrap();
            prop_assert_eq!(back.count(), store.count());
            let a: Vec<u32> = store.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
