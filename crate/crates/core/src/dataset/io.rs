use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{Dataset, SlideInfo, Split, SpotRecord};
use crate::error::{Error, Result};
use crate::neighborhoods::Lattice;
use crate::preprocess::{CompletionProvenance, Source};

pub const FORMAT_VERSION: u32 = 1;

const MANIFEST: &str = "manifest.json";
const SPOTS: &str = "spots.tsv";
const GENES: &str = "genes.txt";
const COUNTS: &str = "counts.tsv";
const EXPRESSION: &str = "expression.tsv";
const OBSERVED: &str = "observed.tsv";
const PROVENANCE: &str = "provenance.tsv";

const SPOT_COLUMNS: [&str; 7] = [
    "spot_id",
    "slide_id",
    "array_row",
    "array_col",
    "pixel_x",
    "pixel_y",
    "split",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub lattice: Lattice,
    pub num_spots: usize,
    pub num_genes: usize,
    pub slides: Vec<ManifestSlide>,
    pub normalization_applied: bool,
    pub genes_selected: bool,
    #[serde(default)]
    pub completed: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestSlide {
    pub slide_id: String,
    pub num_spots: usize,
    pub num_rows: u32,
    pub num_cols: u32,
}

/// Options for reading datasets that lack some payload files.
#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// When `observed.tsv` is absent, treat zero counts as missing.
    pub zeros_are_missing: bool,
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    load_dataset_with(root, LoadOptions::default())
}

pub fn load_dataset_with(root: &Path, options: LoadOptions) -> Result<Dataset> {
    let manifest: DatasetManifest = {
        let text = read_required(root, MANIFEST)?;
        serde_json::from_str(&text).map_err(|e| Error::parse(MANIFEST, e.to_string()))?
    };
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::parse(
            MANIFEST,
            format!("unsupported format_version {}", manifest.format_version),
        ));
    }

    let (spots, spot_splits) = read_spots(root)?;
    let genes: Vec<String> = read_required(root, GENES)?
        .lines()
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect();

    if spots.len() != manifest.num_spots {
        return Err(Error::ShapeMismatch(format!(
            "manifest declares {} spots, {SPOTS} has {}",
            manifest.num_spots,
            spots.len()
        )));
    }
    if genes.len() != manifest.num_genes {
        return Err(Error::ShapeMismatch(format!(
            "manifest declares {} genes, {GENES} has {}",
            manifest.num_genes,
            genes.len()
        )));
    }

    let raw_counts = read_matrix(root, COUNTS, &spots, &genes, |s| {
        let v: i64 = s.parse().map_err(|_| format!("bad count {s:?}"))?;
        u64::try_from(v).map_err(|_| format!("negative count {v}"))
    })?;

    let observed = if root.join(OBSERVED).exists() {
        read_matrix(root, OBSERVED, &spots, &genes, |s| match s {
            "1" => Ok(true),
            "0" => Ok(false),
            other => Err(format!("observed flag must be 0 or 1, got {other:?}")),
        })?
    } else if options.zeros_are_missing {
        raw_counts.mapv(|c| c > 0)
    } else {
        return Err(Error::MissingFile(root.join(OBSERVED)));
    };

    let expression = if root.join(EXPRESSION).exists() {
        read_matrix(root, EXPRESSION, &spots, &genes, |s| {
            s.parse::<f64>().map_err(|_| format!("bad float {s:?}"))
        })?
    } else if options.zeros_are_missing && !manifest.normalization_applied {
        let mut e = raw_counts.mapv(|c| c as f64);
        e.zip_mut_with(&observed, |v, &o| {
            if !o {
                *v = 0.0;
            }
        });
        e
    } else {
        return Err(Error::MissingFile(root.join(EXPRESSION)));
    };

    let mut split = BTreeMap::new();
    for (spot, label) in spots.iter().zip(&spot_splits) {
        match split.insert(spot.slide_id.clone(), *label) {
            Some(prev) if prev != *label => {
                return Err(Error::InvalidDataset(format!(
                    "slide {:?} has conflicting split labels {prev} and {label}",
                    spot.slide_id
                )))
            }
            _ => {}
        }
    }

    let mut slides = Vec::with_capacity(manifest.slides.len());
    for s in &manifest.slides {
        let count = spots.iter().filter(|p| p.slide_id == s.slide_id).count();
        if count != s.num_spots {
            return Err(Error::ShapeMismatch(format!(
                "manifest declares {} spots on slide {:?}, found {count}",
                s.num_spots, s.slide_id
            )));
        }
        slides.push(SlideInfo {
            slide_id: s.slide_id.clone(),
            num_rows: s.num_rows,
            num_cols: s.num_cols,
        });
    }

    let dataset = Dataset {
        lattice: manifest.lattice,
        slides,
        spots,
        genes,
        raw_counts,
        expression,
        observed,
        split,
        normalization_applied: manifest.normalization_applied,
        genes_selected: manifest.genes_selected,
        completed: manifest.completed,
    };
    dataset.validate()?;
    Ok(dataset)
}

pub fn save_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;

    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        lattice: dataset.lattice,
        num_spots: dataset.num_spots(),
        num_genes: dataset.num_genes(),
        slides: dataset
            .slides
            .iter()
            .map(|s| ManifestSlide {
                slide_id: s.slide_id.clone(),
                num_spots: dataset
                    .spots
                    .iter()
                    .filter(|p| p.slide_id == s.slide_id)
                    .count(),
                num_rows: s.num_rows,
                num_cols: s.num_cols,
            })
            .collect(),
        normalization_applied: dataset.normalization_applied,
        genes_selected: dataset.genes_selected,
        completed: dataset.completed,
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    write_file(root, MANIFEST, text.as_bytes())?;

    let mut spots_tsv = tsv_writer();
    spots_tsv
        .write_record(SPOT_COLUMNS)
        .map_err(csv_err(SPOTS))?;
    for spot in &dataset.spots {
        spots_tsv
            .write_record([
                spot.spot_id.clone(),
                spot.slide_id.clone(),
                spot.array_row.to_string(),
                spot.array_col.to_string(),
                spot.pixel_x.to_string(),
                spot.pixel_y.to_string(),
                dataset.split[&spot.slide_id].to_string(),
            ])
            .map_err(csv_err(SPOTS))?;
    }
    write_file(root, SPOTS, &finish(spots_tsv, SPOTS)?)?;

    let mut genes = String::new();
    for gene in &dataset.genes {
        genes.push_str(gene);
        genes.push('\n');
    }
    write_file(root, GENES, genes.as_bytes())?;

    write_matrix(root, COUNTS, dataset, &dataset.raw_counts, |c| {
        c.to_string()
    })?;
    write_matrix(root, EXPRESSION, dataset, &dataset.expression, |v| {
        v.to_string()
    })?;
    write_matrix(root, OBSERVED, dataset, &dataset.observed, |&o| {
        if o { "1" } else { "0" }.to_string()
    })?;
    Ok(())
}

/// Writes the per-entry completion provenance next to a saved dataset.
pub fn save_provenance(
    provenance: &CompletionProvenance,
    dataset: &Dataset,
    root: &Path,
) -> Result<()> {
    if provenance.sources.dim() != dataset.expression.dim() {
        return Err(Error::ShapeMismatch(
            "provenance does not match dataset shape".into(),
        ));
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    write_matrix(root, PROVENANCE, dataset, &provenance.sources, |s| {
        s.as_str().to_string()
    })
}

/// Reads `provenance.tsv` if the dataset directory has one.
pub fn load_provenance(root: &Path, dataset: &Dataset) -> Result<Option<CompletionProvenance>> {
    if !root.join(PROVENANCE).exists() {
        return Ok(None);
    }
    let sources = read_matrix(root, PROVENANCE, &dataset.spots, &dataset.genes, |s| {
        Source::from_str(s).map_err(|e| e.to_string())
    })?;
    let provenance = CompletionProvenance { sources };
    provenance.check_against(dataset)?;
    Ok(Some(provenance))
}

fn read_required(root: &Path, name: &str) -> Result<String> {
    let path = root.join(name);
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    fs::read_to_string(&path).map_err(|e| Error::io(path, e))
}

fn write_file(root: &Path, name: &str, bytes: &[u8]) -> Result<()> {
    let path = root.join(name);
    fs::write(&path, bytes).map_err(|e| Error::io(path, e))
}

fn tsv_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new()
        .delimiter(b'\t')
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new())
}

fn tsv_reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(true)
        .from_reader(text.as_bytes())
}

fn finish(writer: csv::Writer<Vec<u8>>, file: &str) -> Result<Vec<u8>> {
    writer
        .into_inner()
        .map_err(|e| Error::parse(file, e.to_string()))
}

fn csv_err(file: &'static str) -> impl Fn(csv::Error) -> Error {
    move |e| Error::parse(file, e.to_string())
}

fn read_spots(root: &Path) -> Result<(Vec<SpotRecord>, Vec<Split>)> {
    let text = read_required(root, SPOTS)?;
    let mut reader = tsv_reader(&text);
    let header = reader.headers().map_err(csv_err(SPOTS))?.clone();
    if header.iter().collect::<Vec<_>>() != SPOT_COLUMNS {
        return Err(Error::parse(SPOTS, format!("unexpected header {header:?}")));
    }
    let mut spots = Vec::new();
    let mut splits = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err(SPOTS))?;
        let field = |k: usize| record.get(k).unwrap_or_default();
        let bad = |what: &str| Error::parse(SPOTS, format!("row {}: bad {what}", line + 1));
        spots.push(SpotRecord {
            spot_id: field(0).to_string(),
            slide_id: field(1).to_string(),
            array_row: field(2).parse().map_err(|_| bad("array_row"))?,
            array_col: field(3).parse().map_err(|_| bad("array_col"))?,
            pixel_x: field(4).parse().map_err(|_| bad("pixel_x"))?,
            pixel_y: field(5).parse().map_err(|_| bad("pixel_y"))?,
        });
        splits.push(field(6).parse()?);
    }
    Ok((spots, splits))
}

fn read_matrix<V: Clone + Default>(
    root: &Path,
    name: &str,
    spots: &[SpotRecord],
    genes: &[String],
    parse: impl Fn(&str) -> std::result::Result<V, String>,
) -> Result<Array2<V>> {
    let text = read_required(root, name)?;
    let mut reader = tsv_reader(&text);
    let header = reader
        .headers()
        .map_err(|e| Error::parse(name, e.to_string()))?
        .clone();
    if header.len() != genes.len() + 1 {
        return Err(Error::ShapeMismatch(format!(
            "{name} has {} gene columns, expected {}",
            header.len().saturating_sub(1),
            genes.len()
        )));
    }
    if header.iter().skip(1).zip(genes).any(|(h, g)| h != g) {
        return Err(Error::ShapeMismatch(format!(
            "{name} gene columns do not match {GENES}"
        )));
    }
    let mut out = Array2::from_elem((spots.len(), genes.len()), V::default());
    let mut rows = 0usize;
    for record in reader.records() {
        let record = record.map_err(|e| Error::parse(name, e.to_string()))?;
        if rows >= spots.len() {
            rows += 1;
            continue;
        }
        if record.get(0) != Some(spots[rows].spot_id.as_str()) {
            return Err(Error::ShapeMismatch(format!(
                "{name} row {} is {:?}, expected spot {:?}",
                rows + 1,
                record.get(0).unwrap_or_default(),
                spots[rows].spot_id
            )));
        }
        for (j, cell) in record.iter().skip(1).enumerate() {
            out[[rows, j]] = parse(cell).map_err(|m| {
                Error::parse(name, format!("row {}, column {}: {m}", rows + 1, j + 1))
            })?;
        }
        rows += 1;
    }
    if rows != spots.len() {
        return Err(Error::ShapeMismatch(format!(
            "{name} has {rows} rows but {SPOTS} has {} spots",
            spots.len()
        )));
    }
    Ok(out)
}

fn write_matrix<V>(
    root: &Path,
    name: &'static str,
    dataset: &Dataset,
    matrix: &Array2<V>,
    fmt: impl Fn(&V) -> String,
) -> Result<()> {
    let mut w = tsv_writer();
    let mut header = vec!["spot_id".to_string()];
    header.extend(dataset.genes.iter().cloned());
    w.write_record(&header).map_err(csv_err(name))?;
    for (spot, row) in dataset.spots.iter().zip(matrix.rows()) {
        let mut record = Vec::with_capacity(row.len() + 1);
        record.push(spot.spot_id.clone());
        record.extend(row.iter().map(&fmt));
        w.write_record(&record).map_err(csv_err(name))?;
    }
    write_file(root, name, &finish(w, name)?)
}
