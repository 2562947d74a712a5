use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ElectrodeList, Recording};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecordingFormat {
    /// `# rate=<Hz> channels=<a,b,...>` header, one sample per row.
    Csv,
    /// Little-endian f32, channel-major, with a `<path>.json` sidecar.
    RawF32,
}

impl RecordingFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => RecordingFormat::Csv,
            _ => RecordingFormat::RawF32,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RawHeader {
    rate: f64,
    channels: Vec<String>,
    samples: usize,
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn load_recording(path: &Path, format: RecordingFormat) -> Result<Recording> {
    match format {
        RecordingFormat::Csv => parse_csv(&fs::read_to_string(path)?),
        RecordingFormat::RawF32 => load_raw(path),
    }
}

pub fn save_recording(rec: &Recording, path: &Path, format: RecordingFormat) -> Result<()> {
    match format {
        RecordingFormat::Csv => fs::write(path, format_csv(rec))?,
        RecordingFormat::RawF32 => {
            let mut bytes = Vec::with_capacity(rec.num_channels() * rec.samples() * 4);
            for row in &rec.data {
                for &v in row {
                    bytes.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            fs::write(path, bytes)?;
            let header = RawHeader {
                rate: rec.sample_rate,
                channels: rec.channels.clone(),
                samples: rec.samples(),
            };
            fs::write(sidecar(path), serde_json::to_string_pretty(&header).unwrap())?;
        }
    }
    Ok(())
}

fn parse_header(line: &str) -> Result<(f64, Vec<String>)> {
    let body = line
        .strip_prefix('#')
        .ok_or_else(|| Error::parse("line 1", "header must start with '#'"))?;
    let mut rate = None;
    let mut channels = None;
    for tok in body.split_whitespace() {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| Error::parse("line 1", format!("expected key=value, got `{tok}`")))?;
        match k {
            "rate" => {
                rate = Some(v.parse::<f64>().map_err(|_| {
                    Error::parse("line 1, field rate", format!("not a number: `{v}`"))
                })?)
            }
            "channels" => {
                channels = Some(v.split(',').map(str::to_string).collect::<Vec<_>>())
            }
            other => {
                return Err(Error::parse(
                    "line 1",
                    format!("unknown header field `{other}`"),
                ))
            }
        }
    }
    let rate = rate.ok_or_else(|| Error::parse("line 1", "missing field rate"))?;
    let channels = channels.ok_or_else(|| Error::parse("line 1", "missing field channels"))?;
    if channels.iter().any(String::is_empty) {
        return Err(Error::parse("line 1, field channels", "empty channel name"));
    }
    Ok((rate, channels))
}

pub(crate) fn parse_csv(text: &str) -> Result<Recording> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::parse("line 1", "empty file"))?;
    let (rate, channels) = parse_header(header)?;
    let mut data = vec![Vec::new(); channels.len()];
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != channels.len() {
            return Err(Error::parse(
                format!("line {lineno}"),
                format!(
                    "{} columns but header declares {} channels",
                    fields.len(),
                    channels.len()
                ),
            ));
        }
        for (c, f) in fields.iter().enumerate() {
            let v: f64 = f.trim().parse().map_err(|_| {
                Error::parse(
                    format!("line {lineno}, column {}", c + 1),
                    format!("not a number: `{f}`"),
                )
            })?;
            if !v.is_finite() {
                return Err(Error::parse(
                    format!("line {lineno}, column {}", c + 1),
                    "non-finite sample",
                ));
            }
            data[c].push(v);
        }
    }
    Recording::new(rate, channels, data)
}

pub(crate) fn format_csv(rec: &Recording) -> String {
    let mut s = format!("# rate={} channels={}\n", rec.sample_rate, rec.channels.join(","));
    for t in 0..rec.samples() {
        for (c, row) in rec.data.iter().enumerate() {
            if c > 0 {
                s.push(',');
            }
            write!(s, "{}", row[t]).unwrap();
        }
        s.push('\n');
    }
    s
}

fn load_raw(path: &Path) -> Result<Recording> {
    let side = sidecar(path);
    let header: RawHeader = serde_json::from_str(&fs::read_to_string(&side)?)
        .map_err(|e| Error::parse(side.display().to_string(), e.to_string()))?;
    let bytes = fs::read(path)?;
    let expected = header.channels.len() * header.samples * 4;
    if bytes.len() != expected {
        return Err(Error::parse(
            path.display().to_string(),
            format!(
                "{} bytes, header implies {} ({} channels x {} samples)",
                bytes.len(),
                expected,
                header.channels.len(),
                header.samples
            ),
        ));
    }
    let mut data = Vec::with_capacity(header.channels.len());
    for (c, chunk) in bytes.chunks(header.samples * 4).enumerate() {
        let mut row = Vec::with_capacity(header.samples);
        for (t, b) in chunk.chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            if !v.is_finite() {
                return Err(Error::parse(
                    format!("channel {}, sample {t}", header.channels[c]),
                    "non-finite sample",
                ));
            }
            row.push(v as f64);
        }
        data.push(row);
    }
    if header.samples == 0 {
        data = vec![Vec::new(); header.channels.len()];
    }
    Recording::new(header.rate, header.channels, data)
}

pub fn load_electrodes(path: &Path) -> Result<ElectrodeList> {
    let text = fs::read_to_string(path)?;
    let names: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();
    for (i, n) in names.iter().enumerate() {
        if names[..i].contains(n) {
            return Err(Error::parse(
                format!("line {}", i + 1),
                format!("duplicate electrode `{n}`"),
            ));
        }
    }
    Ok(ElectrodeList(names))
}

pub fn save_electrodes(list: &ElectrodeList, path: &Path) -> Result<()> {
    let mut s = list.0.join("\n");
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}
