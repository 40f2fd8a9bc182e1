use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{validate, ClipRecord, DataError, Dataset, DatasetManifest};

pub const MANIFEST_VERSION: u32 = 1;
pub const BLOB_MAGIC: [u8; 4] = *b"MMDG";
pub const BLOB_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClipLine {
    clip_id: String,
    scenario: String,
    location: String,
    label: usize,
    row: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    audio_row: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    consistency: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vis_narration_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    aud_narration_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    audio_consistent: Option<bool>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, msg: impl Into<String>) -> DataError {
    DataError::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Writes one float matrix with the `MMDG` framing: magic, version, rows, dim
/// (all little-endian u32), then row-major little-endian f32.
pub fn write_blob<W: Write>(
    mut w: W,
    rows: usize,
    dim: usize,
    data: &[f32],
) -> std::io::Result<()> {
    debug_assert_eq!(rows * dim, data.len());
    w.write_all(&BLOB_MAGIC)?;
    w.write_all(&BLOB_VERSION.to_le_bytes())?;
    w.write_all(&(rows as u32).to_le_bytes())?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads one framed matrix from the front of `bytes`, returning
/// `(rows, dim, data, bytes consumed)`.
pub fn read_blob(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<f32>, usize), DataError> {
    if bytes.len() < HEADER_LEN {
        return Err(format_err(path, "truncated header"));
    }
    if bytes[0..4] != BLOB_MAGIC {
        return Err(format_err(
            path,
            format!("bad magic bytes {:?}", &bytes[0..4]),
        ));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != BLOB_VERSION {
        return Err(DataError::Version {
            path: path.to_path_buf(),
            found: version,
            expected: BLOB_VERSION,
        });
    }
    let rows = word(8) as usize;
    let dim = word(12) as usize;
    let need = rows
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| format_err(path, "header size overflow"))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() < need {
        return Err(format_err(
            path,
            format!(
                "truncated: header declares {rows}x{dim} floats, {} bytes present",
                body.len()
            ),
        ));
    }
    let data = body[..need]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((rows, dim, data, HEADER_LEN + need))
}

fn write_blob_file(path: &Path, dim: usize, rows: &[&[f32]]) -> Result<(), DataError> {
    let flat: Vec<f32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    let f = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    write_blob(&mut w, rows.len(), dim, &flat).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

fn read_blob_file(path: &Path, want_dim: usize) -> Result<(usize, Vec<f32>), DataError> {
    let mut bytes = Vec::new();
    File::open(path)
        .map_err(io_err(path))?
        .read_to_end(&mut bytes)
        .map_err(io_err(path))?;
    let (rows, dim, data, used) = read_blob(path, &bytes)?;
    if used != bytes.len() {
        return Err(format_err(
            path,
            format!("{} trailing bytes", bytes.len() - used),
        ));
    }
    if rows > 0 && dim != want_dim {
        return Err(format_err(
            path,
            format!("dimension {dim} does not match manifest dimension {want_dim}"),
        ));
    }
    Ok((rows, data))
}

/// Writes `manifest.json`, `clips.jsonl` and the five modality blobs into `dir`.
///
/// `dir` itself is created if missing, but its parent must exist.
pub fn write_dataset(
    manifest: &DatasetManifest,
    records: &[ClipRecord],
    dir: &Path,
) -> Result<(), DataError> {
    validate(manifest, records)?;
    if !dir.is_dir() {
        fs::create_dir(dir).map_err(io_err(dir))?;
    }
    let files = &manifest.files;
    let d = manifest.dims;

    let manifest_path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(&manifest_path, text + "\n").map_err(io_err(&manifest_path))?;

    let clips_path = dir.join(&files.clips);
    let mut w = BufWriter::new(File::create(&clips_path).map_err(io_err(&clips_path))?);
    let mut audio_rows = 0usize;
    for (row, r) in records.iter().enumerate() {
        let audio_row = r.audio.as_ref().map(|_| {
            audio_rows += 1;
            audio_rows - 1
        });
        let line = ClipLine {
            clip_id: r.clip_id.clone(),
            scenario: r.scenario.clone(),
            location: r.location.clone(),
            label: r.label,
            row,
            audio_row,
            consistency: r.consistency,
            vis_narration_text: r.vis_narration_text.clone(),
            aud_narration_text: r.aud_narration_text.clone(),
            audio_consistent: r.audio_consistent,
        };
        serde_json::to_writer(&mut w, &line).expect("clip line serializes");
        w.write_all(b"\n").map_err(io_err(&clips_path))?;
    }
    w.flush().map_err(io_err(&clips_path))?;

    let with_audio: Vec<&ClipRecord> = records.iter().filter(|r| r.audio.is_some()).collect();
    if with_audio.iter().any(|r| r.aud_narration.is_none()) {
        return Err(DataError::Invalid(
            "every clip with audio needs an audio narration".into(),
        ));
    }
    let all = |f: fn(&ClipRecord) -> &[f32]| records.iter().map(f).collect::<Vec<_>>();
    write_blob_file(
        &dir.join(&files.appearance),
        d.appearance,
        &all(|r| &r.appearance),
    )?;
    write_blob_file(&dir.join(&files.motion), d.motion, &all(|r| &r.motion))?;
    write_blob_file(
        &dir.join(&files.vis_narration),
        d.text,
        &all(|r| &r.vis_narration),
    )?;
    let audio: Vec<&[f32]> = with_audio
        .iter()
        .map(|r| r.audio.as_deref().unwrap())
        .collect();
    write_blob_file(&dir.join(&files.audio), d.audio, &audio)?;
    let aud_narr: Vec<&[f32]> = with_audio
        .iter()
        .map(|r| r.aud_narration.as_deref().unwrap())
        .collect();
    write_blob_file(&dir.join(&files.aud_narration), d.text, &aud_narr)?;
    Ok(())
}

/// Loads and validates a dataset directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| format_err(&manifest_path, e.to_string()))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(DataError::Version {
            path: manifest_path,
            found: manifest.version,
            expected: MANIFEST_VERSION,
        });
    }
    let files = manifest.files.clone();
    let d = manifest.dims;
    let path = |name: &str| -> PathBuf { dir.join(name) };

    let clips_path = path(&files.clips);
    let reader = BufReader::new(File::open(&clips_path).map_err(io_err(&clips_path))?);
    let mut lines = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err(&clips_path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ClipLine = serde_json::from_str(&line)
            .map_err(|e| format_err(&clips_path, format!("line {}: {e}", n + 1)))?;
        lines.push(parsed);
    }

    let (ap_rows, ap) = read_blob_file(&path(&files.appearance), d.appearance)?;
    let (mo_rows, mo) = read_blob_file(&path(&files.motion), d.motion)?;
    let (vn_rows, vn) = read_blob_file(&path(&files.vis_narration), d.text)?;
    let (au_rows, au) = read_blob_file(&path(&files.audio), d.audio)?;
    let (an_rows, an) = read_blob_file(&path(&files.aud_narration), d.text)?;
    if ap_rows != lines.len() || mo_rows != lines.len() || vn_rows != lines.len() {
        return Err(DataError::Invalid(format!(
            "{} clips but appearance/motion/narration blobs hold {ap_rows}/{mo_rows}/{vn_rows} rows",
            lines.len()
        )));
    }
    if au_rows != an_rows {
        return Err(DataError::Invalid(format!(
            "audio blob holds {au_rows} rows but audio narration blob holds {an_rows}"
        )));
    }

    let slice = |data: &[f32], dim: usize, row: usize| data[row * dim..(row + 1) * dim].to_vec();
    let mut records = Vec::with_capacity(lines.len());
    for l in lines {
        if l.row >= ap_rows {
            return Err(DataError::Invalid(format!(
                "clip {}: row {} out of range",
                l.clip_id, l.row
            )));
        }
        let (audio, aud_narration) = match l.audio_row {
            Some(ar) if ar < au_rows => {
                (Some(slice(&au, d.audio, ar)), Some(slice(&an, d.text, ar)))
            }
            Some(ar) => {
                return Err(DataError::Invalid(format!(
                    "clip {}: audio row {ar} out of range",
                    l.clip_id
                )))
            }
            None => (None, None),
        };
        records.push(ClipRecord {
            appearance: slice(&ap, d.appearance, l.row),
            motion: slice(&mo, d.motion, l.row),
            vis_narration: slice(&vn, d.text, l.row),
            audio,
            aud_narration,
            clip_id: l.clip_id,
            scenario: l.scenario,
            location: l.location,
            label: l.label,
            consistency: l.consistency,
            vis_narration_text: l.vis_narration_text,
            aud_narration_text: l.aud_narration_text,
            audio_consistent: l.audio_consistent,
        });
    }
    Dataset::new(manifest, records)
}
