//! File formats: delimited count matrices, Matrix-Market triples, label and
//! embedding tables.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::pipeline::CountMatrix;

/// Field delimiter from the extension; `.tsv`/`.tab`/`.txt` are tab separated.
pub fn delimiter_for(path: &Path) -> u8 {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("tsv" | "tab" | "txt") => b'\t',
        _ => b',',
    }
}

fn data_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Data(format!("{}: {msg}", path.display()))
}

/// Reads a cells × genes table: header row of gene ids (first header cell is
/// ignored), then one row per cell starting with its id.
pub fn read_counts(path: &Path) -> Result<CountMatrix> {
    read_counts_delimited(path, delimiter_for(path))
}

/// [`read_counts`] with an explicit field delimiter.
pub fn read_counts_delimited(path: &Path, delimiter: u8) -> Result<CountMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .has_headers(true)
        .from_path(path)
        .map_err(|e| data_err(path, e))?;
    let header = reader.headers().map_err(|e| data_err(path, e))?.clone();
    if header.len() < 2 {
        return Err(data_err(path, "header needs a cell id column and at least one gene"));
    }
    let gene_ids: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
    let mut cell_ids = Vec::new();
    let mut values = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| data_err(path, e))?;
        if record.len() != header.len() {
            return Err(data_err(
                path,
                format!("row {} has {} fields, expected {}", line + 2, record.len(), header.len()),
            ));
        }
        cell_ids.push(record[0].to_owned());
        for (j, field) in record.iter().skip(1).enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                data_err(path, format!("cell {} gene {}: {field:?} is not a number", &record[0], gene_ids[j]))
            })?;
            values.push(v);
        }
    }
    let counts = Array2::from_shape_vec((cell_ids.len(), gene_ids.len()), values).expect("row lengths checked");
    CountMatrix::new(cell_ids, gene_ids, counts)
}

/// Writes a count matrix in the layout read by [`read_counts`].
pub fn write_counts(path: &Path, m: &CountMatrix) -> Result<()> {
    let mut header = vec!["cell_id".to_owned()];
    header.extend(m.gene_ids().iter().cloned());
    write_table(path, &header, m.cell_ids(), m.counts())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let file = File::open(path).map_err(|e| data_err(path, e))?;
    BufReader::new(file)
        .lines()
        .map(|l| l.map_err(|e| data_err(path, e)))
        .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
        .collect()
}

/// Reads a genes × cells Matrix-Market coordinate file with its gene and
/// barcode lists, returning the transposed cells × genes matrix. Only the
/// first column of the gene file is used as the id.
pub fn read_matrix_market(matrix: &Path, genes: &Path, barcodes: &Path) -> Result<CountMatrix> {
    let gene_ids: Vec<String> = read_lines(genes)?
        .iter()
        .map(|l| l.split('\t').next().unwrap_or_default().trim().to_owned())
        .collect();
    let cell_ids: Vec<String> = read_lines(barcodes)?.iter().map(|l| l.trim().to_owned()).collect();

    let lines = read_lines(matrix)?;
    let banner = lines.first().ok_or_else(|| data_err(matrix, "empty file"))?;
    let banner_lc = banner.to_ascii_lowercase();
    if !banner_lc.starts_with("%%matrixmarket matrix coordinate") {
        return Err(data_err(matrix, "expected a coordinate Matrix-Market banner"));
    }
    if banner_lc.contains("complex") || banner_lc.contains("pattern") {
        return Err(data_err(matrix, "only real or integer matrices are supported"));
    }
    let symmetric = !banner_lc.contains("general");
    if symmetric {
        return Err(data_err(matrix, "only general (non-symmetric) matrices are supported"));
    }
    let mut body = lines.iter().skip(1).filter(|l| !l.starts_with('%'));
    let dims: Vec<usize> = body
        .next()
        .ok_or_else(|| data_err(matrix, "missing size line"))?
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| data_err(matrix, format!("bad size entry {t:?}"))))
        .collect::<Result<_>>()?;
    let [rows, cols, nnz] = dims[..] else {
        return Err(data_err(matrix, "size line must hold rows, columns and entries"));
    };
    if rows != gene_ids.len() || cols != cell_ids.len() {
        return Err(data_err(
            matrix,
            format!(
                "matrix is {rows}x{cols} but there are {} genes and {} barcodes",
                gene_ids.len(),
                cell_ids.len()
            ),
        ));
    }
    let mut counts = Array2::zeros((cols, rows));
    let mut seen = 0;
    for line in body {
        let t: Vec<&str> = line.split_whitespace().collect();
        if t.len() != 3 {
            return Err(data_err(matrix, format!("bad entry line {line:?}")));
        }
        let parse_idx = |s: &str, max: usize| -> Result<usize> {
            match s.parse::<usize>() {
                Ok(i) if (1..=max).contains(&i) => Ok(i - 1),
                _ => Err(data_err(matrix, format!("index {s:?} out of range 1..={max}"))),
            }
        };
        let g = parse_idx(t[0], rows)?;
        let c = parse_idx(t[1], cols)?;
        let v: f64 = t[2].parse().map_err(|_| data_err(matrix, format!("bad value {:?}", t[2])))?;
        counts[[c, g]] += v;
        seen += 1;
    }
    if seen != nnz {
        return Err(data_err(matrix, format!("declared {nnz} entries, found {seen}")));
    }
    CountMatrix::new(cell_ids, gene_ids, counts)
}

/// Decimal rendering with at most 9 significant digits.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { v.to_string() };
    }
    let exp = v.abs().log10().floor() as i32;
    if !(-6..=15).contains(&exp) {
        return format!("{v:.8e}");
    }
    let decimals = (8 - exp).max(0) as usize;
    let s = format!("{v:.decimals$}");
    let s = if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_owned()
    } else {
        s
    };
    if s == "-0" {
        "0".into()
    } else {
        s
    }
}

/// Writes `row_id, values...` rows under `header`, numbers with 9 significant digits.
pub fn write_table(path: &Path, header: &[String], row_ids: &[String], values: &Array2<f64>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().delimiter(delimiter_for(path)).from_path(path)?;
    w.write_record(header)?;
    for (id, row) in row_ids.iter().zip(values.outer_iter()) {
        let mut record = vec![id.clone()];
        record.extend(row.iter().map(|&v| format_sig9(v)));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// Embeddings table with columns `cell_id, z0, z1, ...`.
pub fn write_embeddings(path: &Path, cell_ids: &[String], z: &Array2<f64>) -> Result<()> {
    let mut header = vec!["cell_id".to_owned()];
    header.extend((0..z.ncols()).map(|j| format!("z{j}")));
    write_table(path, &header, cell_ids, z)
}

/// Two-column `cell_id, <column>` table.
pub fn write_labels<T: ToString>(path: &Path, column: &str, cell_ids: &[String], labels: &[T]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().delimiter(delimiter_for(path)).from_path(path)?;
    w.write_record(["cell_id", column])?;
    for (id, l) in cell_ids.iter().zip(labels) {
        w.write_record([id.clone(), l.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a two-column `cell_id, label` table with a header row.
pub fn read_labels(path: &Path) -> Result<Vec<(String, String)>> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter_for(path))
        .from_path(path)
        .map_err(|e| data_err(path, e))?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| data_err(path, e))?;
        if record.len() < 2 {
            return Err(data_err(path, "label rows need a cell id and a label"));
        }
        out.push((record[0].to_owned(), record[1].trim().to_owned()));
    }
    Ok(out)
}

/// Matches two label tables by cell id and encodes each side's labels as
/// integers. Every cell of `truth` must appear in `pred`.
pub fn align_labels(truth: &[(String, String)], pred: &[(String, String)]) -> Result<(Vec<usize>, Vec<usize>)> {
    let pred_map: HashMap<&str, &str> = pred.iter().map(|(c, l)| (c.as_str(), l.as_str())).collect();
    if pred_map.len() != pred.len() {
        return Err(Error::data("prediction table has duplicate cell ids"));
    }
    let mut encode_t = BTreeMap::new();
    let mut encode_p = BTreeMap::new();
    let mut a = Vec::with_capacity(truth.len());
    let mut b = Vec::with_capacity(truth.len());
    for (cell, label) in truth {
        let p = pred_map
            .get(cell.as_str())
            .ok_or_else(|| Error::data(format!("cell {cell} has no predicted label")))?;
        let next = encode_t.len();
        a.push(*encode_t.entry(label.as_str()).or_insert(next));
        let next = encode_p.len();
        b.push(*encode_p.entry(*p).or_insert(next));
    }
    Ok((a, b))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| data_err(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| data_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(0.0), "0");
        assert_eq!(format_sig9(-0.0), "0");
        assert_eq!(format_sig9(3.0), "3");
        assert_eq!(format_sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(format_sig9(-123456.789012), "-123456.789");
        assert_eq!(format_sig9(2.5e-3), "0.0025");
        assert_eq!(format_sig9(1.23456789012e-9), "1.23456789e-9");
        let v = 0.1234567891234;
        assert!((format_sig9(v).parse::<f64>().unwrap() - v).abs() < 1e-9);
    }

    #[test]
    fn counts_round_trip_csv_and_tsv() {
        let dir = tempfile::tempdir().unwrap();
        let m = CountMatrix::new(
            vec!["a".into(), "b".into()],
            vec!["g1".into(), "g2".into(), "g3".into()],
            array![[0.0, 3.0, 1.0], [7.0, 0.0, 2.0]],
        )
        .unwrap();
        for name in ["m.csv", "m.tsv"] {
            let path = dir.path().join(name);
            write_counts(&path, &m).unwrap();
            assert_eq!(read_counts(&path).unwrap(), m);
        }
        let text = std::fs::read_to_string(dir.path().join("m.tsv")).unwrap();
        assert!(text.starts_with("cell_id\tg1\tg2\tg3\n"));
    }

    #[test]
    fn malformed_counts_are_data_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "cell,g1,g2\na,1,x\n").unwrap();
        let err = read_counts(&path).unwrap_err();
        assert!(matches!(err, Error::Data(_)), "{err}");
        assert!(err.to_string().contains("g2"));
        std::fs::write(&path, "cell,g1,g2\na,1\n").unwrap();
        assert!(matches!(read_counts(&path), Err(Error::Data(_))));
        assert!(matches!(read_counts(&dir.path().join("missing.csv")), Err(Error::Data(_))));
    }

    #[test]
    fn matrix_market_is_transposed() {
        let dir = tempfile::tempdir().unwrap();
        let mtx = dir.path().join("matrix.mtx");
        let genes = dir.path().join("genes.tsv");
        let cells = dir.path().join("barcodes.tsv");
        std::fs::write(
            &mtx,
            "%%MatrixMarket matrix coordinate integer general\n% comment\n3 2 3\n1 1 5\n3 1 2\n2 2 4\n",
        )
        .unwrap();
        std::fs::write(&genes, "G1\tname1\nG2\tname2\nG3\tname3\n").unwrap();
        std::fs::write(&cells, "AAA\nCCC\n").unwrap();
        let m = read_matrix_market(&mtx, &genes, &cells).unwrap();
        assert_eq!(m.cell_ids(), ["AAA", "CCC"]);
        assert_eq!(m.gene_ids(), ["G1", "G2", "G3"]);
        assert_eq!(m.counts(), &array![[5.0, 0.0, 2.0], [0.0, 4.0, 0.0]]);

        std::fs::write(&mtx, "%%MatrixMarket matrix coordinate integer general\n3 2 2\n1 1 5\n").unwrap();
        assert!(read_matrix_market(&mtx, &genes, &cells).is_err());
    }

    #[test]
    fn labels_align_by_cell_id() {
        let truth = vec![("x".into(), "B".into()), ("y".into(), "A".into()), ("z".into(), "B".into())];
        let pred = vec![("z".into(), "1".into()), ("x".into(), "1".into()), ("y".into(), "0".into())];
        let (a, b) = align_labels(&truth, &pred).unwrap();
        assert_eq!(a, vec![0, 1, 0]);
        assert_eq!(b, vec![0, 1, 0]);
        let missing = vec![("x".into(), "1".into())];
        assert!(align_labels(&truth, &missing).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.csv");
        write_labels(&path, "label", &["x".to_owned(), "y".to_owned()], &[3, 4]).unwrap();
        assert_eq!(read_labels(&path).unwrap(), vec![("x".into(), "3".into()), ("y".into(), "4".into())]);
    }
}
