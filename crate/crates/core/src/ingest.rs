//! Delimited-file ingestion and the rescannable record stream every
//! estimator pass runs over.
//!
//! A file is never materialized: indexing makes one sequential pass that
//! assigns dense row/column indices in first-appearance order, counts the
//! observation pattern and drops a checkpoint every [`CHECKPOINT_EVERY`]
//! records. Later passes re-read the file, either whole or from a
//! checkpoint, so shards can start mid-file at a known record ordinal.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Cursor, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_profile, validate_observation, DatasetProfile, Observation};

/// Records between two scan checkpoints of a file-backed dataset.
pub const CHECKPOINT_EVERY: u64 = 4096;

/// Lower bound on the records per reduction chunk in deterministic mode.
pub const MIN_CHUNK_RECORDS: u64 = 1 << 16;

#[derive(Debug, Clone)]
pub enum Location {
    Path(PathBuf),
    Buffer(Arc<[u8]>),
}

/// How to read a delimited file.
#[derive(Debug, Clone)]
pub struct Schema {
    /// Covariates per record, intercept excluded. `None` infers it from
    /// the header or the first record.
    pub covariates: Option<usize>,
    pub delimiter: u8,
    pub has_header: bool,
}

impl Default for Schema {
    fn default() -> Self {
        Self {
            covariates: None,
            delimiter: b',',
            has_header: true,
        }
    }
}

/// A rescannable delimited source.
#[derive(Debug, Clone)]
pub struct ScanSource {
    location: Location,
    covariates: usize,
    delimiter: u8,
    has_header: bool,
    /// Byte offset of the first data line.
    data_start: u64,
}

/// A parsed line, borrowed from the reader's buffers.
#[derive(Debug)]
pub struct RawRecord<'a> {
    pub line: u64,
    pub ordinal: u64,
    pub row_key: &'a str,
    pub col_key: &'a str,
    /// Intercept first.
    pub x: &'a [f64],
    pub y: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Checkpoint {
    pub byte: u64,
    /// 1-based line number of the line starting at `byte`.
    pub line: u64,
    /// Records preceding this position.
    pub ordinal: u64,
}

enum Reader {
    File(BufReader<File>),
    Buffer(Cursor<Arc<[u8]>>),
}

impl Reader {
    fn read_line(&mut self, buf: &mut Vec<u8>) -> std::io::Result<usize> {
        match self {
            Reader::File(r) => r.read_until(b'\n', buf),
            Reader::Buffer(r) => r.read_until(b'\n', buf),
        }
    }
}

pub fn open_source(location: Location, schema: &Schema) -> Result<ScanSource> {
    let mut src = ScanSource {
        location,
        covariates: schema.covariates.unwrap_or(0),
        delimiter: schema.delimiter,
        has_header: schema.has_header,
        data_start: 0,
    };
    let mut reader = src.reader_at(0)?;
    let mut buf = Vec::new();
    let n = reader.read_line(&mut buf).map_err(|e| src.io_err(e))?;
    let first = String::from_utf8_lossy(&buf);
    let first = first.trim_end_matches(['\n', '\r']);
    let fields = if first.trim().is_empty() {
        None
    } else {
        Some(first.split(src.delimiter as char).count())
    };

    if schema.has_header {
        let fields = fields.ok_or_else(|| Error::MalformedHeader("empty header line".into()))?;
        if fields < 3 {
            return Err(Error::MalformedHeader(format!(
                "expected row_id,col_id,y[,x1..xp], found {fields} field(s)"
            )));
        }
        if first.split(src.delimiter as char).any(|f| f.trim().is_empty()) {
            return Err(Error::MalformedHeader("empty column name".into()));
        }
        match schema.covariates {
            Some(p) if p + 3 != fields => {
                return Err(Error::MalformedHeader(format!(
                    "header has {} covariate column(s), schema expects {p}",
                    fields - 3
                )))
            }
            _ => src.covariates = fields - 3,
        }
        src.data_start = n as u64;
    } else if schema.covariates.is_none() {
        src.covariates = fields.map_or(0, |f| f.saturating_sub(3));
    }
    Ok(src)
}

/// Opens a file path.
pub fn open_path(path: impl AsRef<Path>, schema: &Schema) -> Result<ScanSource> {
    open_source(Location::Path(path.as_ref().to_path_buf()), schema)
}

impl ScanSource {
    pub fn from_bytes(bytes: impl Into<Arc<[u8]>>, schema: &Schema) -> Result<ScanSource> {
        open_source(Location::Buffer(bytes.into()), schema)
    }

    pub fn covariates(&self) -> usize {
        self.covariates
    }

    /// In-memory record width: covariates plus the intercept.
    pub fn width(&self) -> usize {
        self.covariates + 1
    }

    fn io_err(&self, e: std::io::Error) -> Error {
        match &self.location {
            Location::Path(p) => Error::io(p.clone(), e),
            Location::Buffer(_) => Error::io("<buffer>", e),
        }
    }

    fn reader_at(&self, byte: u64) -> Result<Reader> {
        match &self.location {
            Location::Path(p) => {
                let mut f = File::open(p).map_err(|e| Error::io(p.clone(), e))?;
                if byte > 0 {
                    f.seek(SeekFrom::Start(byte)).map_err(|e| Error::io(p.clone(), e))?;
                }
                Ok(Reader::File(BufReader::with_capacity(1 << 16, f)))
            }
            Location::Buffer(b) => {
                let mut c = Cursor::new(Arc::clone(b));
                c.set_position(byte);
                Ok(Reader::Buffer(c))
            }
        }
    }

    fn start(&self) -> Checkpoint {
        Checkpoint {
            byte: self.data_start,
            line: if self.has_header { 2 } else { 1 },
            ordinal: 0,
        }
    }

    /// Sequential scan of every record in file order.
    pub fn scan<F>(&self, mut f: F) -> Result<()>
    where
        F: FnMut(&RawRecord<'_>, u64) -> Result<()>,
    {
        self.scan_from(self.start(), u64::MAX, |rec, byte| f(rec, byte))
    }

    /// Scans records with ordinal in `[from.ordinal, end)`. The callback
    /// also receives the byte offset of the record's line.
    fn scan_from<F>(&self, from: Checkpoint, end: u64, mut f: F) -> Result<()>
    where
        F: FnMut(&RawRecord<'_>, u64) -> Result<()>,
    {
        let mut reader = self.reader_at(from.byte)?;
        let mut buf = Vec::with_capacity(256);
        let mut x = vec![0.0; self.width()];
        let (mut byte, mut line, mut ordinal) = (from.byte, from.line, from.ordinal);
        while ordinal < end {
            buf.clear();
            let n = reader.read_line(&mut buf).map_err(|e| self.io_err(e))?;
            if n == 0 {
                break;
            }
            let text = std::str::from_utf8(&buf).map_err(|_| Error::Parse {
                line,
                message: "invalid UTF-8".into(),
            })?;
            let text = text.trim_end_matches(['\n', '\r']);
            if !text.trim().is_empty() {
                let (row_key, col_key, y) = self.parse_line(text, line, &mut x)?;
                let rec = RawRecord {
                    line,
                    ordinal,
                    row_key,
                    col_key,
                    x: &x,
                    y,
                };
                f(&rec, byte)?;
                ordinal += 1;
            }
            byte += n as u64;
            line += 1;
        }
        Ok(())
    }

    fn parse_line<'t>(&self, text: &'t str, line: u64, x: &mut [f64]) -> Result<(&'t str, &'t str, f64)> {
        let perr = |message: String| Error::Parse { line, message };
        let mut fields = text.split(self.delimiter as char);
        let mut key = |what: &str| -> Result<&'t str> {
            match fields.next().map(str::trim) {
                Some(k) if !k.is_empty() => Ok(k),
                _ => Err(perr(format!("missing {what}"))),
            }
        };
        let row_key = key("row_id")?;
        let col_key = key("col_id")?;
        let num = |s: Option<&str>, what: &str| -> Result<f64> {
            let s = s.ok_or_else(|| perr(format!("missing {what}")))?.trim();
            let v: f64 = s.parse().map_err(|_| perr(format!("{what} is not a number: {s:?}")))?;
            if !v.is_finite() {
                return Err(perr(format!("{what} is not finite: {s:?}")));
            }
            Ok(v)
        };
        let y = num(fields.next(), "y")?;
        x[0] = 1.0;
        for (k, slot) in x.iter_mut().enumerate().skip(1) {
            *slot = num(fields.next(), &format!("x{k}"))?;
        }
        if fields.next().is_some() {
            return Err(perr(format!("too many fields, expected {}", self.covariates + 3)));
        }
        Ok((row_key, col_key, y))
    }
}

/// What to do with repeated (row, column) cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DedupPolicy {
    /// Trust the input to hold at most one record per cell. No extra memory.
    #[default]
    AssumeUnique,
    /// Keep the most recent record of each cell. Needs memory per distinct cell.
    KeepLast,
    KeepFirst,
    Error,
}

/// Conditions under which the moment system may be singular.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignWarning {
    FewRows,
    FewColumns,
    RowDominates,
    ColumnDominates,
}

/// One record of an indexed dataset. `x[0]` is the intercept.
#[derive(Debug, Clone, Copy)]
pub struct Record<'a> {
    pub row: u32,
    pub col: u32,
    pub x: &'a [f64],
    pub y: f64,
}

/// Owned copy of a [`Record`], for small in-memory work.
#[derive(Debug, Clone, PartialEq)]
pub struct OwnedRecord {
    pub row: u32,
    pub col: u32,
    pub x: Vec<f64>,
    pub y: f64,
}

/// Columnar in-memory records with dense indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MemoryRecords {
    pub rows: Vec<u32>,
    pub cols: Vec<u32>,
    /// Row-major, `width` values per record.
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

#[derive(Debug)]
enum Storage {
    Source {
        source: ScanSource,
        checkpoints: Vec<Checkpoint>,
        records: u64,
        row_index: HashMap<String, u32>,
        col_index: HashMap<String, u32>,
        /// Ordinal of the retained record per cell (keep-first/keep-last only).
        kept: Option<HashMap<(u32, u32), u64>>,
    },
    Memory(MemoryRecords),
}

/// A contiguous run of records, by ordinal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: u64,
    pub end: u64,
    checkpoint: Option<Checkpoint>,
}

/// Records with dense indices and their count profile. Every estimator
/// pass is a scan over this.
#[derive(Debug)]
pub struct IndexedDataset {
    storage: Storage,
    width: usize,
    row_keys: Vec<String>,
    col_keys: Vec<String>,
    profile: DatasetProfile,
    dedup: DedupPolicy,
    transposed: bool,
    warnings: Vec<DesignWarning>,
    passes: AtomicUsize,
}

fn key_index(map: &mut HashMap<String, u32>, keys: &mut Vec<String>, key: &str) -> u32 {
    if let Some(&i) = map.get(key) {
        return i;
    }
    let i = keys.len() as u32;
    keys.push(key.to_owned());
    map.insert(key.to_owned(), i);
    i
}

fn bump(counts: &mut Vec<u64>, i: u32) {
    let i = i as usize;
    if counts.len() <= i {
        counts.resize(i + 1, 0);
    }
    counts[i] += 1;
}

fn design_warnings(profile: &DatasetProfile) -> Vec<DesignWarning> {
    let mut w = Vec::new();
    if profile.rows() < 2 {
        w.push(DesignWarning::FewRows);
    }
    if profile.cols() < 2 {
        w.push(DesignWarning::FewColumns);
    }
    if profile.eps_r() > 0.5 {
        w.push(DesignWarning::RowDominates);
    }
    if profile.eps_c() > 0.5 {
        w.push(DesignWarning::ColumnDominates);
    }
    w
}

/// One indexing pass over `source`: dense indices, duplicate handling,
/// profile and checkpoints.
pub fn index_dataset(source: ScanSource, policy: DedupPolicy) -> Result<IndexedDataset> {
    let mut row_index = HashMap::new();
    let mut col_index = HashMap::new();
    let mut row_keys = Vec::new();
    let mut col_keys = Vec::new();
    let mut row_counts = Vec::new();
    let mut col_counts = Vec::new();
    let mut checkpoints = Vec::new();
    let mut seen: Option<HashMap<(u32, u32), u64>> = match policy {
        DedupPolicy::AssumeUnique => None,
        _ => Some(HashMap::new()),
    };
    let mut records = 0u64;

    source.scan(|rec, byte| {
        if rec.ordinal % CHECKPOINT_EVERY == 0 {
            checkpoints.push(Checkpoint {
                byte,
                line: rec.line,
                ordinal: rec.ordinal,
            });
        }
        records = rec.ordinal + 1;
        let r = key_index(&mut row_index, &mut row_keys, rec.row_key);
        let c = key_index(&mut col_index, &mut col_keys, rec.col_key);
        let fresh = match seen.as_mut() {
            None => true,
            Some(seen) => match seen.entry((r, c)) {
                Entry::Vacant(v) => {
                    v.insert(rec.ordinal);
                    true
                }
                Entry::Occupied(mut o) => {
                    match policy {
                        DedupPolicy::KeepLast => {
                            o.insert(rec.ordinal);
                        }
                        DedupPolicy::Error => {
                            return Err(Error::DuplicateCell {
                                row: rec.row_key.to_owned(),
                                col: rec.col_key.to_owned(),
                                line: rec.line,
                            })
                        }
                        _ => {}
                    }
                    false
                }
            },
        };
        if fresh {
            bump(&mut row_counts, r);
            bump(&mut col_counts, c);
        }
        Ok(())
    })?;

    if records == 0 {
        return Err(Error::EmptyDataset);
    }
    let kept = match policy {
        DedupPolicy::KeepFirst | DedupPolicy::KeepLast => seen,
        _ => None,
    };
    let profile = build_profile(row_counts, col_counts)?;
    let width = source.width();
    Ok(IndexedDataset {
        warnings: design_warnings(&profile),
        storage: Storage::Source {
            source,
            checkpoints,
            records,
            row_index,
            col_index,
            kept,
        },
        width,
        row_keys,
        col_keys,
        profile,
        dedup: policy,
        transposed: false,
        passes: AtomicUsize::new(0),
    })
}

impl IndexedDataset {
    /// Indexes in-memory observations (validated, deduplicated per `policy`).
    pub fn from_observations(obs: &[Observation], policy: DedupPolicy) -> Result<Self> {
        let width = obs.first().ok_or(Error::EmptyDataset)?.x.len();
        let mut row_index = HashMap::new();
        let mut col_index = HashMap::new();
        let mut row_keys = Vec::new();
        let mut col_keys = Vec::new();
        let mut cells: Vec<(u32, u32)> = Vec::with_capacity(obs.len());
        let mut slot: HashMap<(u32, u32), usize> = HashMap::new();
        let mut chosen: Vec<Option<usize>> = Vec::with_capacity(obs.len());
        for (k, o) in obs.iter().enumerate() {
            validate_observation(o, width)?;
            let r = key_index(&mut row_index, &mut row_keys, &o.row_key);
            let c = key_index(&mut col_index, &mut col_keys, &o.col_key);
            if policy == DedupPolicy::AssumeUnique {
                cells.push((r, c));
                chosen.push(Some(k));
                continue;
            }
            match slot.entry((r, c)) {
                Entry::Vacant(v) => {
                    v.insert(cells.len());
                    cells.push((r, c));
                    chosen.push(Some(k));
                }
                Entry::Occupied(o2) => match policy {
                    DedupPolicy::KeepLast => chosen[*o2.get()] = Some(k),
                    DedupPolicy::Error => {
                        return Err(Error::DuplicateCell {
                            row: o.row_key.clone(),
                            col: o.col_key.clone(),
                            line: k as u64 + 1,
                        })
                    }
                    _ => {}
                },
            }
        }
        let mut mem = MemoryRecords::default();
        for (&(r, c), k) in cells.iter().zip(&chosen) {
            let o = &obs[k.expect("every cell has a record")];
            mem.rows.push(r);
            mem.cols.push(c);
            mem.x.extend_from_slice(&o.x);
            mem.y.push(o.y);
        }
        Self::from_memory(mem, width, row_keys, col_keys, policy)
    }

    /// Wraps records that already carry dense indices `0..R`, `0..C` with
    /// every index observed at least once.
    pub fn from_memory(
        records: MemoryRecords,
        width: usize,
        row_keys: Vec<String>,
        col_keys: Vec<String>,
        dedup: DedupPolicy,
    ) -> Result<Self> {
        let n = records.y.len();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if records.rows.len() != n || records.cols.len() != n || records.x.len() != n * width {
            return Err(Error::InvalidConfig("inconsistent record column lengths".into()));
        }
        let mut row_counts = vec![0u64; row_keys.len()];
        let mut col_counts = vec![0u64; col_keys.len()];
        for (&r, &c) in records.rows.iter().zip(&records.cols) {
            let (r, c) = (r as usize, c as usize);
            if r >= row_counts.len() || c >= col_counts.len() {
                return Err(Error::InvalidConfig(format!("index ({r}, {c}) out of range")));
            }
            row_counts[r] += 1;
            col_counts[c] += 1;
        }
        let profile = build_profile(row_counts, col_counts)?;
        Ok(Self {
            warnings: design_warnings(&profile),
            storage: Storage::Memory(records),
            width,
            row_keys,
            col_keys,
            profile,
            dedup,
            transposed: false,
            passes: AtomicUsize::new(0),
        })
    }

    pub fn profile(&self) -> &DatasetProfile {
        &self.profile
    }

    /// Record width including the intercept.
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n(&self) -> u64 {
        self.profile.n
    }

    pub fn row_keys(&self) -> &[String] {
        &self.row_keys
    }

    pub fn col_keys(&self) -> &[String] {
        &self.col_keys
    }

    pub fn dedup_policy(&self) -> DedupPolicy {
        self.dedup
    }

    pub fn warnings(&self) -> &[DesignWarning] {
        &self.warnings
    }

    /// Full scans performed so far.
    pub fn passes(&self) -> usize {
        self.passes.load(Ordering::Relaxed)
    }

    pub(crate) fn count_pass(&self) {
        self.passes.fetch_add(1, Ordering::Relaxed);
    }

    pub fn is_in_memory(&self) -> bool {
        matches!(self.storage, Storage::Memory(_))
    }

    /// The same data with the roles of rows and columns exchanged.
    pub fn transposed(&self) -> Result<IndexedDataset> {
        let storage = match &self.storage {
            Storage::Memory(m) => Storage::Memory(m.clone()),
            Storage::Source {
                source,
                checkpoints,
                records,
                row_index,
                col_index,
                kept,
            } => Storage::Source {
                source: source.clone(),
                checkpoints: checkpoints.clone(),
                records: *records,
                row_index: row_index.clone(),
                col_index: col_index.clone(),
                kept: kept.clone(),
            },
        };
        let profile = build_profile(self.profile.col_counts.clone(), self.profile.row_counts.clone())?;
        Ok(IndexedDataset {
            storage,
            width: self.width,
            row_keys: self.col_keys.clone(),
            col_keys: self.row_keys.clone(),
            warnings: design_warnings(&profile),
            profile,
            dedup: self.dedup,
            transposed: !self.transposed,
            passes: AtomicUsize::new(0),
        })
    }

    fn total_ordinals(&self) -> u64 {
        match &self.storage {
            Storage::Memory(m) => m.y.len() as u64,
            Storage::Source { records, .. } => *records,
        }
    }

    /// Sequential scan over every logical record in storage order.
    pub fn for_each<F: FnMut(Record<'_>)>(&self, f: F) -> Result<()> {
        let all = Segment {
            start: 0,
            end: self.total_ordinals(),
            checkpoint: self.checkpoint_for(0),
        };
        self.scan_segment(&all, f)
    }

    pub fn collect_records(&self) -> Result<Vec<OwnedRecord>> {
        let mut out = Vec::with_capacity(self.profile.n as usize);
        self.for_each(|r| {
            out.push(OwnedRecord {
                row: r.row,
                col: r.col,
                x: r.x.to_vec(),
                y: r.y,
            })
        })?;
        Ok(out)
    }

    fn checkpoint_for(&self, ordinal: u64) -> Option<Checkpoint> {
        match &self.storage {
            Storage::Memory(_) => None,
            Storage::Source { checkpoints, .. } => {
                let k = (ordinal / CHECKPOINT_EVERY) as usize;
                checkpoints.get(k).copied()
            }
        }
    }

    fn segment_unit(&self) -> u64 {
        match self.storage {
            Storage::Memory(_) => 1,
            Storage::Source { .. } => CHECKPOINT_EVERY,
        }
    }

    fn segments_at(&self, bounds: impl Iterator<Item = u64>) -> Vec<Segment> {
        let total = self.total_ordinals();
        let mut cuts: Vec<u64> = bounds.filter(|&b| b > 0 && b < total).collect();
        cuts.push(total);
        cuts.dedup();
        let mut out = Vec::with_capacity(cuts.len());
        let mut start = 0;
        for end in cuts {
            if end > start {
                out.push(Segment {
                    start,
                    end,
                    checkpoint: self.checkpoint_for(start),
                });
                start = end;
            }
        }
        out
    }

    /// Splits the records into at most `parts` contiguous segments of
    /// roughly equal size.
    pub fn partition(&self, parts: usize) -> Vec<Segment> {
        let parts = parts.max(1) as u64;
        let total = self.total_ordinals();
        let unit = self.segment_unit();
        self.segments_at((1..parts).map(|k| {
            let b = total * k / parts;
            (b + unit / 2) / unit * unit
        }))
    }

    /// Fixed-size segments that depend on the data only, never on the
    /// number of shards.
    pub fn fixed_chunks(&self) -> Vec<Segment> {
        let total = self.total_ordinals();
        let unit = self.segment_unit();
        let groups = (self.profile.rows() + self.profile.cols()) as u64;
        let len = MIN_CHUNK_RECORDS.max(groups).div_ceil(unit) * unit;
        self.segments_at((1..).map(|k| k * len).take_while(|&b| b < total))
    }

    /// Scans the records of one segment in storage order.
    pub fn scan_segment<F: FnMut(Record<'_>)>(&self, seg: &Segment, mut f: F) -> Result<()> {
        let swap = self.transposed;
        let emit = |f: &mut F, row: u32, col: u32, x: &[f64], y: f64| {
            let (row, col) = if swap { (col, row) } else { (row, col) };
            f(Record { row, col, x, y })
        };
        match &self.storage {
            Storage::Memory(m) => {
                let w = self.width;
                for k in seg.start as usize..seg.end as usize {
                    emit(&mut f, m.rows[k], m.cols[k], &m.x[k * w..(k + 1) * w], m.y[k]);
                }
                Ok(())
            }
            Storage::Source {
                source,
                row_index,
                col_index,
                kept,
                ..
            } => {
                let from = seg.checkpoint.expect("file segments start at a checkpoint");
                debug_assert_eq!(from.ordinal, seg.start);
                source.scan_from(from, seg.end, |rec, _| {
                    let lookup = |map: &HashMap<String, u32>, key: &str| {
                        map.get(key).copied().ok_or_else(|| Error::Parse {
                            line: rec.line,
                            message: format!("key {key:?} not seen while indexing (file changed?)"),
                        })
                    };
                    let (r, c) = if swap {
                        (lookup(col_index, rec.col_key)?, lookup(row_index, rec.row_key)?)
                    } else {
                        (lookup(row_index, rec.row_key)?, lookup(col_index, rec.col_key)?)
                    };
                    if let Some(kept) = kept {
                        let cell = if swap { (c, r) } else { (r, c) };
                        if kept.get(&cell) != Some(&rec.ordinal) {
                            return Ok(());
                        }
                    }
                    f(Record {
                        row: r,
                        col: c,
                        x: rec.x,
                        y: rec.y,
                    });
                    Ok(())
                })
            }
        }
    }
}

/// Writes records as `row_id,col_id,y,x1..xp` with a header line.
pub fn write_csv<W: Write>(ds: &IndexedDataset, mut out: W) -> Result<()> {
    let io = |e| Error::io("<output>", e);
    let mut header = String::from("row_id,col_id,y");
    for k in 1..ds.width() {
        header.push_str(&format!(",x{k}"));
    }
    writeln!(out, "{header}").map_err(io)?;
    let mut err = None;
    let mut line = String::new();
    ds.for_each(|r| {
        if err.is_some() {
            return;
        }
        line.clear();
        line.push_str(&ds.row_keys()[r.row as usize]);
        line.push(',');
        line.push_str(&ds.col_keys()[r.col as usize]);
        line.push_str(&format!(",{:e}", r.y));
        for v in &r.x[1..] {
            line.push_str(&format!(",{v:e}"));
        }
        if let Err(e) = writeln!(out, "{line}") {
            err = Some(e);
        }
    })?;
    match err {
        Some(e) => Err(io(e)),
        None => Ok(()),
    }
}

/// Reads all bytes of a reader into a buffer source.
pub fn source_from_reader<R: Read>(mut r: R, schema: &Schema) -> Result<ScanSource> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io("<reader>", e))?;
    ScanSource::from_bytes(bytes, schema)
}
