use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Sample, Vocabulary, EOS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Deserialize)]
#[serde(untagged)]
enum Features {
    Inline(Vec<Vec<f64>>),
    /// Path to a raw feature file, relative to the JSONL file.
    Sidecar(String),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    id: String,
    transcript: String,
    summary: String,
    video_features: Features,
}

/// Reads a JSONL dataset. Without `vocab`, one is built from all transcripts
/// and summaries. Without `d_raw`, the first sample with features fixes it.
pub fn load_jsonl(path: &Path, vocab: Option<&Vocabulary>, d_raw: Option<usize>) -> Result<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut width = d_raw;
    let mut parsed = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let schema = |message: String| Error::Schema {
            line: line_no,
            message,
        };
        let rec: Record = serde_json::from_str(line).map_err(|e| schema(e.to_string()))?;
        let video = match rec.video_features {
            Features::Inline(rows) if rows.is_empty() => None,
            Features::Inline(rows) => {
                let w = *width.get_or_insert(rows[0].len());
                if let Some((r, row)) = rows.iter().enumerate().find(|(_, r)| r.len() != w) {
                    return Err(schema(format!(
                        "feature row {r} has width {}, expected d_raw = {w}",
                        row.len()
                    )));
                }
                if rows.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(schema("non-finite feature value".into()));
                }
                Some(Tensor::from_rows(&rows).map_err(|e| schema(e.to_string()))?)
            }
            Features::Sidecar(rel) => {
                let t = read_sidecar(&base.join(&rel)).map_err(|e| schema(e.to_string()))?;
                let w = *width.get_or_insert(t.cols());
                if t.cols() != w {
                    return Err(schema(format!(
                        "sidecar `{rel}` has width {}, expected d_raw = {w}",
                        t.cols()
                    )));
                }
                Some(t)
            }
        };
        parsed.push((line_no, rec.id, rec.transcript, rec.summary, video));
    }

    let vocab = match vocab {
        Some(v) => v.clone(),
        None => Vocabulary::from_corpus(
            parsed
                .iter()
                .flat_map(|(_, _, t, s, _)| [t.as_str(), s.as_str()]),
        ),
    };
    let mut samples = Vec::with_capacity(parsed.len());
    for (line, id, transcript, summary, video) in parsed {
        let mut summary = vocab.tokenize(&summary);
        summary.push(EOS);
        let sample = Sample {
            id,
            transcript: vocab.tokenize(&transcript),
            video,
            summary,
        };
        sample.validate().map_err(|e| Error::Schema {
            line,
            message: e.to_string(),
        })?;
        samples.push(sample);
    }
    Ok(Dataset {
        vocab,
        d_raw: width.unwrap_or(0),
        samples,
    })
}

/// Formats with 17 significant digits, which round-trips every `f64`.
fn push_float(out: &mut String, v: f64) {
    write!(out, "{v:.16e}").expect("writing to a String");
}

/// Writes one JSON object per sample with inline features.
pub fn save_jsonl(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for s in &dataset.samples {
        out.push_str("{\"id\":");
        out.push_str(&serde_json::to_string(&s.id)?);
        out.push_str(",\"transcript\":");
        out.push_str(&serde_json::to_string(&dataset.vocab.detokenize(&s.transcript))?);
        out.push_str(",\"summary\":");
        out.push_str(&serde_json::to_string(&dataset.vocab.detokenize(&s.summary))?);
        out.push_str(",\"video_features\":[");
        if let Some(v) = &s.video {
            for r in 0..v.rows() {
                if r > 0 {
                    out.push(',');
                }
                out.push('[');
                for (j, &x) in v.row(r).iter().enumerate() {
                    if j > 0 {
                        out.push(',');
                    }
                    push_float(&mut out, x);
                }
                out.push(']');
            }
        }
        out.push_str("]}\n");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct SidecarHeader {
    n_v: usize,
    d_raw: usize,
}

/// Reads a raw feature file: a one-line JSON header `{"n_v":…,"d_raw":…}`
/// followed by n_v·d_raw little-endian `f32` values.
pub fn read_sidecar(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Data(format!("{}: missing header line", path.display())))?;
    let header: SidecarHeader = serde_json::from_slice(&bytes[..nl])?;
    let body = &bytes[nl + 1..];
    let expected = header.n_v * header.d_raw * 4;
    if body.len() != expected {
        return Err(Error::Data(format!(
            "{}: header declares {}×{} floats ({expected} bytes), found {} bytes",
            path.display(),
            header.n_v,
            header.d_raw,
            body.len()
        )));
    }
    let data: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data(format!("{}: non-finite feature value", path.display())));
    }
    Tensor::new(vec![header.n_v, header.d_raw], data)
}

/// Writes `features` (n_v × d_raw) as a raw feature file, narrowing to `f32`.
pub fn write_sidecar(path: &Path, features: &Tensor) -> Result<()> {
    let header = SidecarHeader {
        n_v: features.rows(),
        d_raw: features.cols(),
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    for &v in features.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn empty_file_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "e.jsonl", "");
        let ds = load_jsonl(&p, None, None).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn one_line_round_trips_bit_identically() {
        let dir = tempfile::tempdir().unwrap();
        let line = r#"{"id":"a","transcript":"The cat sat","summary":"cat sat","video_features":[[0.1,-2.5e-7],[3.0,0.30000000000000004]]}"#;
        let p = write(dir.path(), "a.jsonl", line);
        let ds = load_jsonl(&p, None, None).unwrap();
        let out = dir.path().join("b.jsonl");
        save_jsonl(&ds, &out).unwrap();
        let again = load_jsonl(&out, None, None).unwrap();
        assert_eq!(again, ds);
        let out2 = dir.path().join("c.jsonl");
        save_jsonl(&again, &out2).unwrap();
        assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&out2).unwrap());
        let v = again.samples[0].video.as_ref().unwrap();
        assert_eq!(v.at(1, 1).to_bits(), 0.30000000000000004f64.to_bits());
    }

    #[test]
    fn width_mismatch_names_line_and_width() {
        let dir = tempfile::tempdir().unwrap();
        let body = concat!(
            r#"{"id":"a","transcript":"x","summary":"x","video_features":[[1,2]]}"#,
            "\n",
            r#"{"id":"b","transcript":"x","summary":"x","video_features":[[1,2,3]]}"#,
        );
        let p = write(dir.path(), "w.jsonl", body);
        let err = load_jsonl(&p, None, None).unwrap_err();
        match err {
            Error::Schema { line, message } => {
                assert_eq!(line, 2);
                assert!(message.contains("d_raw = 2"), "{message}");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "m.jsonl", "\n{not json}\n");
        assert!(matches!(
            load_jsonl(&p, None, None),
            Err(Error::Schema { line: 2, .. })
        ));
    }

    #[test]
    fn sidecar_round_trip_and_ingestion() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.25, 0.0, 1.0, -3.5]).unwrap();
        write_sidecar(&dir.path().join("f.bin"), &t).unwrap();
        assert_eq!(read_sidecar(&dir.path().join("f.bin")).unwrap(), t);

        let p = write(
            dir.path(),
            "s.jsonl",
            r#"{"id":"a","transcript":"x y","summary":"y","video_features":"f.bin"}"#,
        );
        let ds = load_jsonl(&p, None, None).unwrap();
        assert_eq!(ds.d_raw, 3);
        assert_eq!(ds.samples[0].video.as_ref().unwrap(), &t);
    }
}
