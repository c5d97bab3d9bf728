//! CSV ingestion and export.
//!
//! Expected layout: a header row, an optional leading `timestamp` column
//! (ignored), one numeric column per channel and, for labeled files, a
//! final `label` column holding 0 or 1.

use std::path::Path;

use super::dataset::TimeSeriesDataset;
use crate::error::{DartsError, Result};

pub fn load_csv(path: &Path, has_labels: bool) -> Result<TimeSeriesDataset> {
    let file = std::fs::File::open(path).map_err(|e| DartsError::io(path, e))?;
    read_csv(file, has_labels, &path.display().to_string())
}

pub fn read_csv<R: std::io::Read>(input: R, has_labels: bool, source: &str) -> Result<TimeSeriesDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| DartsError::format(format!("{source}: header"), e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    let first = usize::from(header.first().is_some_and(|h| h.eq_ignore_ascii_case("timestamp")));
    let label_col = if has_labels {
        match header.last() {
            Some(h) if h.eq_ignore_ascii_case("label") && header.len() > first + 1 => Some(header.len() - 1),
            _ => {
                return Err(DartsError::format(
                    format!("{source}: header"),
                    "missing final `label` column",
                ))
            }
        }
    } else {
        None
    };
    let channel_end = label_col.unwrap_or(header.len());
    let names: Vec<String> = header[first..channel_end].to_vec();
    if names.is_empty() {
        return Err(DartsError::format(format!("{source}: header"), "no channel columns"));
    }

    let mut values = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2; // 1-based, header is row 1
        let record = record.map_err(|e| DartsError::format(format!("{source}: row {row}"), e.to_string()))?;
        if record.len() != header.len() {
            return Err(DartsError::format(
                format!("{source}: row {row}"),
                format!("expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        for col in first..channel_end {
            let cell = &record[col];
            let v: f64 = cell.parse().map_err(|_| {
                DartsError::format(
                    format!("{source}: row {row}, column {} ({})", col + 1, header[col]),
                    format!("non-numeric cell {cell:?}"),
                )
            })?;
            if !v.is_finite() {
                return Err(DartsError::format(
                    format!("{source}: row {row}, column {} ({})", col + 1, header[col]),
                    "missing or non-finite value",
                ));
            }
            values.push(v);
        }
        if let Some(lc) = label_col {
            let cell = &record[lc];
            let label = match cell.parse::<f64>() {
                Ok(v) if v == 0.0 => false,
                Ok(v) if v == 1.0 => true,
                _ => {
                    return Err(DartsError::format(
                        format!("{source}: row {row}, column {} (label)", lc + 1),
                        format!("label must be 0 or 1, found {cell:?}"),
                    ))
                }
            };
            labels.push(label);
        }
    }
    if values.is_empty() {
        return Err(DartsError::format(source.to_string(), "no data rows"));
    }
    TimeSeriesDataset::new(values, names, label_col.map(|_| labels))
}

/// Writes the dataset with an integer `timestamp` column; labels are appended when present.
/// Values use the shortest representation that parses back to the same `f64`.
pub fn write_csv(path: &Path, ds: &TimeSeriesDataset) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| DartsError::io(path, e))?;
    let io = |e: csv::Error| DartsError::io(path, std::io::Error::other(e));
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let mut header = vec!["timestamp".to_string()];
    header.extend(ds.channel_names().iter().cloned());
    if ds.labels().is_some() {
        header.push("label".into());
    }
    w.write_record(&header).map_err(io)?;
    let mut fields = Vec::with_capacity(header.len());
    for (t, row) in ds.rows().enumerate() {
        fields.clear();
        fields.push(t.to_string());
        fields.extend(row.iter().map(|v| v.to_string()));
        if let Some(l) = ds.labels() {
            fields.push(if l[t] { "1".into() } else { "0".into() });
        }
        w.write_record(&fields).map_err(io)?;
    }
    w.flush().map_err(|e| DartsError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str, labels: bool) -> Result<TimeSeriesDataset> {
        read_csv(text.as_bytes(), labels, "inline")
    }

    #[test]
    fn parses_labeled_file() {
        let ds = parse("timestamp,a,b,label\n0,1.0,2.0,0\n1,1.5,2.5,1\n2,1.0,2.0,0\n", true).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.n_channels(), 2);
        assert_eq!(ds.channel_names(), &["a".to_string(), "b".to_string()]);
        assert!((ds.anomaly_ratio().unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn wide_file_keeps_every_channel() {
        let header: Vec<String> = (0..118).map(|i| format!("v{i}")).collect();
        let row: Vec<String> = (0..118).map(|i| format!("{}", i as f64 * 0.5)).collect();
        let text = format!("{}\n{}\n{}\n", header.join(","), row.join(","), row.join(","));
        let ds = parse(&text, false).unwrap();
        assert_eq!(ds.n_channels(), 118);
    }

    #[test]
    fn empty_data_section_is_an_error() {
        assert!(matches!(parse("a,b\n", false), Err(DartsError::Format { .. })));
    }

    #[test]
    fn ragged_row_reports_location() {
        let err = parse("a,b\n1,2\n3\n", false).unwrap_err();
        assert!(err.to_string().contains("row 3"), "{err}");
    }

    #[test]
    fn non_numeric_cell_reports_column() {
        let err = parse("a,b\n1,x\n", false).unwrap_err();
        let s = err.to_string();
        assert!(s.contains("row 2") && s.contains("column 2"), "{s}");
    }

    #[test]
    fn missing_label_column() {
        assert!(parse("a,b\n1,2\n", true).is_err());
    }

    #[test]
    fn empty_cell_is_rejected() {
        assert!(parse("a,b\n1,\n", false).is_err());
    }
}
