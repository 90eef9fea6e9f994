//! File formats: JSON with 17-significant-digit floats, CSV reports at 9
//! digits, atomic writes.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::ser::Formatter;

use crate::error::{check_len, Result};
use crate::optimizer::RunRecord;
use crate::synth::{Dataset, Tag};

/// Writes every finite float as `d.ddddddddddddddddde±x`, which round-trips exactly.
#[derive(Clone, Copy, Debug, Default)]
pub struct PreciseFormatter;

impl Formatter for PreciseFormatter {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        write!(writer, "{value:.8e}")
    }
}

pub fn to_json_bytes<T: Serialize + ?Sized>(value: &T) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, PreciseFormatter);
    value.serialize(&mut ser)?;
    out.push(b'\n');
    Ok(out)
}

/// Write to a sibling temp file, then rename over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, &to_json_bytes(value)?)
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn save_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    save_json(path, dataset)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let ds: Dataset = load_json(path)?;
    ds.spec.validate()?;
    Ok(ds)
}

/// Round to 9 significant digits and print in the shortest form that keeps them.
pub fn fmt9(x: f64) -> String {
    if !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let rounded: f64 = format!("{x:.8e}").parse().unwrap_or(x);
    format!("{rounded}")
}

pub fn tag_name(tag: Tag) -> &'static str {
    match tag {
        Tag::Sparse => "sparse",
        Tag::Dense => "dense",
    }
}

pub const TRACE_HEADER: &str = "epoch,sample_id,volume_id,slice_index,tag,ce,ac,beta";

/// Per-epoch sample traces, one row per (logged epoch, sample).
pub fn traces_csv(record: &RunRecord, dataset: &Dataset) -> Result<String> {
    let mut s = String::from(TRACE_HEADER);
    s.push('\n');
    for tr in &record.traces {
        check_len("trace length", dataset.len(), tr.ce.len())?;
        for (i, smp) in dataset.samples.iter().enumerate() {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                tr.epoch,
                i,
                smp.volume_id,
                smp.slice_index,
                tag_name(smp.tag),
                fmt9(tr.ce[i]),
                fmt9(tr.ac[i]),
                fmt9(tr.beta[i])
            ));
        }
    }
    Ok(s)
}

/// Simple CSV builder with a fixed header.
pub struct Csv {
    columns: usize,
    text: String,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Self {
            columns: header.len(),
            text: format!("{}\n", header.join(",")),
        }
    }

    pub fn row(&mut self, cells: &[String]) {
        debug_assert_eq!(cells.len(), self.columns);
        self.text.push_str(&cells.join(","));
        self.text.push('\n');
    }

    pub fn as_str(&self) -> &str {
        &self.text
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.text.as_bytes())
    }
}
