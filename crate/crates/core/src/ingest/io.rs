//! Reading and writing cohorts.
//!
//! A cohort is a JSON manifest plus, per slide, a patch table (CSV), one
//! raw little-endian `f32` feature matrix per scale with a
//! `<path>.meta.json` shape sidecar, and a cell-statistics CSV. Paths in
//! the manifest are resolved relative to the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{CellStats, Cohort, PatchRecord, Scale, SlideBundle, SurvivalLabel, DEFAULT_TYPE_VOCAB};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub d: usize,
    pub p: usize,
    #[serde(default = "default_vocab")]
    pub type_vocab: Vec<String>,
    pub cell_feature_names: Vec<String>,
    /// Microns per pixel at the LOW scale. Defaults to 1.0, which gives a
    /// 128 µm footprint half-width.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub low_mpp: Option<f64>,
    pub slides: Vec<ManifestSlide>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSlide {
    pub slide_id: String,
    pub time_months: f64,
    pub event: u8,
    pub patch_table: PathBuf,
    pub features_low: PathBuf,
    pub features_high: PathBuf,
    pub cell_stats: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_log_hazard: Option<f64>,
}

fn default_vocab() -> Vec<String> {
    DEFAULT_TYPE_VOCAB.iter().map(|s| s.to_string()).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct MatrixMeta {
    rows: usize,
    cols: usize,
}

fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn read_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a feature matrix and its sidecar; returns `(rows, cols, data)`.
fn read_matrix(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let meta_file = meta_path(path);
    let meta: MatrixMeta = serde_json::from_str(&read_string(&meta_file)?)
        .map_err(|e| Error::format(&meta_file, e.to_string()))?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != meta.rows * meta.cols * 4 {
        return Err(Error::format(
            path,
            format!(
                "{} bytes does not match {}x{} f32 matrix",
                bytes.len(),
                meta.rows,
                meta.cols
            ),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((meta.rows, meta.cols, data))
}

fn write_matrix(path: &Path, rows: &[&[f32]], cols: usize) -> Result<()> {
    let mut bytes = Vec::with_capacity(rows.len() * cols * 4);
    for row in rows {
        for v in *row {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_bytes(path, &bytes)?;
    let meta = serde_json::to_string(&MatrixMeta {
        rows: rows.len(),
        cols,
    })
    .expect("meta serializes");
    write_bytes(&meta_path(path), meta.as_bytes())
}

fn csv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::format(path, e.to_string()))
}

fn parse<T: std::str::FromStr>(path: &Path, field: &str, raw: &str) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| Error::format(path, format!("cannot parse {field} from {raw:?}")))
}

struct PatchRow {
    patch_id: i64,
    scale: Scale,
    x: f64,
    y: f64,
    type_id: Option<u8>,
    feat_row: usize,
}

fn read_patch_table(path: &Path) -> Result<Vec<PatchRow>> {
    let mut rdr = csv_reader(path)?;
    let header = rdr
        .headers()
        .map_err(|e| Error::format(path, e.to_string()))?
        .clone();
    let expected = ["patch_id", "scale", "x_um", "y_um", "type_id", "feat_row"];
    if header.iter().map(str::trim).ne(expected) {
        return Err(Error::format(
            path,
            format!("expected header {}", expected.join(",")),
        ));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        let scale = match rec[1].trim() {
            "L" => Scale::Low,
            "H" => Scale::High,
            other => return Err(Error::format(path, format!("unknown scale {other:?}"))),
        };
        let type_id = match rec[4].trim() {
            "" => None,
            raw => Some(parse::<u8>(path, "type_id", raw)?),
        };
        out.push(PatchRow {
            patch_id: parse(path, "patch_id", &rec[0])?,
            scale,
            x: parse(path, "x_um", &rec[2])?,
            y: parse(path, "y_um", &rec[3])?,
            type_id,
            feat_row: parse(path, "feat_row", &rec[5])?,
        });
    }
    Ok(out)
}

fn read_cell_stats(path: &Path, names: &[String]) -> Result<Vec<CellStats>> {
    let mut rdr = csv_reader(path)?;
    let header = rdr
        .headers()
        .map_err(|e| Error::format(path, e.to_string()))?
        .clone();
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got.first() != Some(&"patch_id") || got[1..] != names.iter().map(String::as_str).collect::<Vec<_>>()[..] {
        return Err(Error::format(
            path,
            "cell statistics header must be patch_id followed by the manifest feature names",
        ));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
        let patch_id = parse(path, "patch_id", &rec[0])?;
        let values = rec
            .iter()
            .skip(1)
            .map(|raw| parse::<f64>(path, "cell statistic", raw))
            .collect::<Result<Vec<_>>>()?;
        out.push(CellStats { patch_id, values });
    }
    Ok(out)
}

fn load_slide(base: &Path, entry: &ManifestSlide, m: &Manifest) -> Result<SlideBundle> {
    let slide = || entry.slide_id.clone();
    let table = read_patch_table(&base.join(&entry.patch_table))?;
    let mut patches = Vec::with_capacity(table.len());
    for (scale, file) in [
        (Scale::Low, &entry.features_low),
        (Scale::High, &entry.features_high),
    ] {
        let (rows, cols, data) = read_matrix(&base.join(file))?;
        let mut scale_rows: Vec<&PatchRow> = table.iter().filter(|r| r.scale == scale).collect();
        if scale_rows.len() != rows {
            return Err(Error::DimensionMismatch {
                slide: slide(),
                message: format!(
                    "{scale:?} feature matrix has {rows} rows for {} patches",
                    scale_rows.len()
                ),
            });
        }
        if cols != m.d {
            return Err(Error::DimensionMismatch {
                slide: slide(),
                message: format!("{scale:?} feature matrix has {cols} columns, d = {}", m.d),
            });
        }
        scale_rows.sort_by_key(|r| r.feat_row);
        for (i, r) in scale_rows.iter().enumerate() {
            if r.feat_row != i {
                return Err(Error::DimensionMismatch {
                    slide: slide(),
                    message: format!("{scale:?} feat_row values must cover 0..{rows} exactly"),
                });
            }
            patches.push(PatchRecord {
                patch_id: r.patch_id,
                scale,
                x: r.x,
                y: r.y,
                type_id: r.type_id,
                feature: data[i * cols..(i + 1) * cols].to_vec(),
            });
        }
    }
    let cell_stats = read_cell_stats(&base.join(&entry.cell_stats), &m.cell_feature_names)?;
    let event = match entry.event {
        0 => false,
        1 => true,
        other => {
            return Err(Error::Invalid(format!(
                "slide {}: event must be 0 or 1, got {other}",
                entry.slide_id
            )))
        }
    };
    Ok(SlideBundle {
        slide_id: entry.slide_id.clone(),
        patches,
        cell_stats,
        label: SurvivalLabel::new(entry.time_months, event).map_err(|e| {
            Error::Invalid(format!("slide {}: {e}", entry.slide_id))
        })?,
        true_log_hazard: entry.true_log_hazard,
    })
}

/// Loads and fully validates a cohort from its manifest.
pub fn load_cohort(manifest_path: impl AsRef<Path>) -> Result<Cohort> {
    let manifest_path = manifest_path.as_ref();
    let manifest: Manifest = serde_json::from_str(&read_string(manifest_path)?)
        .map_err(|e| Error::format(manifest_path, e.to_string()))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let slides = manifest
        .slides
        .par_iter()
        .map(|entry| load_slide(base, entry, &manifest))
        .collect::<Result<Vec<_>>>()?;
    let cohort = Cohort {
        slides,
        d: manifest.d,
        p: manifest.p,
        type_vocab: manifest.type_vocab,
        cell_feature_names: manifest.cell_feature_names,
        low_mpp: manifest.low_mpp.unwrap_or(1.0),
    };
    cohort.validate()?;
    Ok(cohort)
}

fn write_slide(dir: &Path, rel: &Path, slide: &SlideBundle, names: &[String], d: usize) -> Result<ManifestSlide> {
    let patch_table = rel.join("patches.csv");
    let features_low = rel.join("features_low.f32");
    let features_high = rel.join("features_high.f32");
    let cell_stats = rel.join("cell_stats.csv");

    let mut table = String::from("patch_id,scale,x_um,y_um,type_id,feat_row\n");
    for scale in [Scale::Low, Scale::High] {
        let rows: Vec<&PatchRecord> = slide.patches_at(scale).collect();
        for (i, p) in rows.iter().enumerate() {
            let (tag, ty) = match scale {
                Scale::Low => ("L", String::new()),
                Scale::High => ("H", p.type_id.map(|t| t.to_string()).unwrap_or_default()),
            };
            table.push_str(&format!("{},{tag},{},{},{ty},{i}\n", p.patch_id, p.x, p.y));
        }
        let data: Vec<&[f32]> = rows.iter().map(|p| p.feature.as_slice()).collect();
        let file = match scale {
            Scale::Low => &features_low,
            Scale::High => &features_high,
        };
        write_matrix(&dir.join(file), &data, d)?;
    }
    write_bytes(&dir.join(&patch_table), table.as_bytes())?;

    let mut stats = String::from("patch_id");
    for n in names {
        stats.push(',');
        stats.push_str(n);
    }
    stats.push('\n');
    for cs in &slide.cell_stats {
        stats.push_str(&cs.patch_id.to_string());
        for v in &cs.values {
            stats.push_str(&format!(",{v}"));
        }
        stats.push('\n');
    }
    write_bytes(&dir.join(&cell_stats), stats.as_bytes())?;

    Ok(ManifestSlide {
        slide_id: slide.slide_id.clone(),
        time_months: slide.label.time,
        event: u8::from(slide.label.event),
        patch_table,
        features_low,
        features_high,
        cell_stats,
        true_log_hazard: slide.true_log_hazard,
    })
}

/// Writes `cohort` under `dir` and returns the manifest path.
pub fn write_cohort(cohort: &Cohort, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    let slides = cohort
        .slides
        .par_iter()
        .map(|s| {
            let rel = Path::new("slides").join(&s.slide_id);
            write_slide(dir, &rel, s, &cohort.cell_feature_names, cohort.d)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        d: cohort.d,
        p: cohort.p,
        type_vocab: cohort.type_vocab.clone(),
        cell_feature_names: cohort.cell_feature_names.clone(),
        low_mpp: Some(cohort.low_mpp),
        slides,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_bytes(&path, text.as_bytes())?;
    Ok(path)
}
