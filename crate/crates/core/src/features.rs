//! Image feature file IO. Plain text: a `rows cols` header line, then one
//! whitespace-separated row of floats per line. Values are written with
//! `{}` so a write/read round trip reproduces every bit.

use std::fmt::Write as _;
use std::io::BufRead;
use std::path::Path;

use thiserror::Error;

use crate::tensor::{FeatureMatrix, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path} line {line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FeatureError + '_ {
    move |source| FeatureError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> FeatureError {
    FeatureError::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

/// Read a feature matrix. The header fixes the shape; every row must match.
pub fn read_features(path: &Path) -> Result<FeatureMatrix, FeatureError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut lines = std::io::BufReader::new(file).lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "missing header line"))?;
    let header = header.map_err(io_err(path))?;
    let dims: Vec<&str> = header.split_whitespace().collect();
    if dims.len() != 2 {
        return Err(parse_err(path, 1, "header must be 'rows cols'"));
    }
    let rows: usize = dims[0]
        .parse()
        .map_err(|e| parse_err(path, 1, format!("bad row count: {e}")))?;
    let cols: usize = dims[1]
        .parse()
        .map_err(|e| parse_err(path, 1, format!("bad column count: {e}")))?;

    let mut data = Vec::with_capacity(rows * cols);
    let mut seen = 0usize;
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        seen += 1;
        if seen > rows {
            return Err(parse_err(
                path,
                lineno,
                format!("more than {rows} data rows"),
            ));
        }
        let mut count = 0usize;
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|e| parse_err(path, lineno, format!("bad value '{tok}': {e}")))?;
            data.push(v);
            count += 1;
        }
        if count != cols {
            return Err(parse_err(
                path,
                lineno,
                format!("expected {cols} values, found {count}"),
            ));
        }
    }
    if seen != rows {
        return Err(parse_err(
            path,
            seen + 1,
            format!("expected {rows} data rows, found {seen}"),
        ));
    }
    Ok(Tensor::new(vec![rows, cols], data)?)
}

/// Write a feature matrix in the format `read_features` accepts.
pub fn write_features(path: &Path, features: &FeatureMatrix) -> Result<(), FeatureError> {
    let rows = features.rows();
    let cols = features.cols();
    let mut out = String::new();
    let _ = writeln!(out, "{rows} {cols}");
    for r in 0..rows {
        for c in 0..cols {
            if c > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{}", features.get(r, c));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.txt");
        let m = Tensor::matrix(2, 3, vec![0.1, -2.5e-17, 3.0, 1.0 / 3.0, 0.0, -0.0]).unwrap();
        write_features(&path, &m).unwrap();
        let back = read_features(&path).unwrap();
        assert!(back.bit_eq(&m));
    }

    #[test]
    fn shape_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.txt");

        std::fs::write(&path, "2 2\n1 2 3\n4 5\n").unwrap();
        match read_features(&path) {
            Err(FeatureError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }

        std::fs::write(&path, "2 2\n1 2\n").unwrap();
        assert!(matches!(
            read_features(&path),
            Err(FeatureError::Parse { .. })
        ));

        std::fs::write(&path, "2 2\n1 2\n3 4\n5 6\n").unwrap();
        assert!(matches!(
            read_features(&path),
            Err(FeatureError::Parse { line: 4, .. })
        ));

        std::fs::write(&path, "nope\n").unwrap();
        assert!(matches!(
            read_features(&path),
            Err(FeatureError::Parse { line: 1, .. })
        ));

        std::fs::write(&path, "1 2\n1 oops\n").unwrap();
        assert!(matches!(
            read_features(&path),
            Err(FeatureError::Parse { line: 2, .. })
        ));
    }

    proptest! {
        #[test]
        fn random_matrices_round_trip(
            rows in 1usize..5,
            cols in 1usize..5,
            seedbits in proptest::collection::vec(-1.0e6f64..1.0e6, 16),
        ) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("f.txt");
            let data: Vec<f64> = (0..rows * cols)
                .map(|i| seedbits[i % seedbits.len()] / 3.0)
                .collect();
            let m = Tensor::matrix(rows, cols, data).unwrap();
            write_features(&path, &m).unwrap();
            let back = read_features(&path).unwrap();
            prop_assert!(back.bit_eq(&m));
        }
    }
}
