//! Matrix, parcellation and manifest file formats.
//!
//! Dense matrices are stored either as headered CSV (row-major, one header
//! line `c0,c1,...`, values printed like C's `%.17g`) or as a binary file: the
//! magic `SHPC`, `u32` rows, `u32` cols, four reserved zero bytes, then
//! `rows * cols` little-endian `f64` values in row-major order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::spectral::Parcellation;

pub const BINARY_MAGIC: &[u8; 4] = b"SHPC";
pub const BINARY_HEADER_LEN: usize = 16;

/// Formats `x` the way C's `printf("%.17g", x)` does.
pub fn format_g17(x: f64) -> String {
    const P: i32 = 17;
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() {
            "-0".into()
        } else {
            "0".into()
        };
    }
    let sci = format!("{:.*e}", (P - 1) as usize, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-4..P).contains(&exp) {
        let fixed = format!("{:.*}", (P - 1 - exp) as usize, x);
        strip_zeros(&fixed).to_string()
    } else {
        let m = strip_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    }
}

fn strip_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn matrix_to_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    let header: Vec<String> = (0..m.ncols()).map(|c| format!("c{c}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(|&v| format_g17(v)).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn matrix_from_csv(text: &str, path: &Path) -> Result<DMatrix<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let ncols = reader
        .headers()
        .map_err(|e| Error::format(path, e.to_string()))?
        .len();
    let mut values = Vec::new();
    let mut nrows = 0;
    for record in reader.records() {
        let record = record.map_err(|e| Error::format(path, e.to_string()))?;
        if record.len() != ncols {
            return Err(Error::format(
                path,
                format!(
                    "row {} has {} fields, header has {ncols}",
                    nrows + 1,
                    record.len()
                ),
            ));
        }
        for field in record.iter() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::format(path, format!("bad number '{field}'")))?;
            values.push(v);
        }
        nrows += 1;
    }
    Ok(DMatrix::from_row_slice(nrows, ncols, &values))
}

pub fn matrix_to_binary(m: &DMatrix<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(BINARY_HEADER_LEN + 8 * m.len());
    out.extend_from_slice(BINARY_MAGIC);
    out.extend_from_slice(&(m.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u32).to_le_bytes());
    out.extend_from_slice(&[0u8; 4]);
    for row in m.row_iter() {
        for v in row.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn matrix_from_binary(bytes: &[u8], path: &Path) -> Result<DMatrix<f64>> {
    if bytes.len() < BINARY_HEADER_LEN || &bytes[..4] != BINARY_MAGIC {
        return Err(Error::format(path, "missing SHPC header"));
    }
    let word =
        |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as usize;
    let (rows, cols) = (word(4), word(8));
    let body = &bytes[BINARY_HEADER_LEN..];
    if body.len() != rows * cols * 8 {
        return Err(Error::format(
            path,
            format!(
                "expected {} data bytes for {rows}x{cols}, found {}",
                rows * cols * 8,
                body.len()
            ),
        ));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

fn is_binary(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("bin"))
}

/// Reads a dense matrix, choosing the format from the extension (`.bin`
/// is binary, anything else CSV).
pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if is_binary(path) {
        matrix_from_binary(&bytes, path)
    } else {
        let text = String::from_utf8(bytes).map_err(|_| Error::format(path, "not UTF-8"))?;
        matrix_from_csv(&text, path)
    }
}

pub fn encode_matrix(m: &DMatrix<f64>, path: &Path) -> Vec<u8> {
    if is_binary(path) {
        matrix_to_binary(m)
    } else {
        matrix_to_csv(m).into_bytes()
    }
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    write_atomic(path, &encode_matrix(m, path))
}

pub fn parcellation_to_csv(p: &Parcellation) -> String {
    let mut out = String::from("voxel_index,label\n");
    for (v, l) in p.labels().iter().enumerate() {
        out.push_str(&format!("{v},{l}\n"));
    }
    out
}

pub fn parcellation_from_csv(text: &str, path: &Path) -> Result<Parcellation> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let mut entries: Vec<(usize, usize)> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::format(path, e.to_string()))?;
        let field = |i: usize| -> Result<usize> {
            record
                .get(i)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::format(path, format!("bad parcellation row {record:?}")))
        };
        entries.push((field(0)?, field(1)?));
    }
    entries.sort_unstable();
    if entries.iter().enumerate().any(|(i, &(v, _))| v != i) {
        return Err(Error::format(
            path,
            "voxel indices must cover 0..V exactly once",
        ));
    }
    let labels: Vec<usize> = entries.into_iter().map(|(_, l)| l).collect();
    let k = labels.iter().max().map_or(0, |m| m + 1);
    Parcellation::new(labels, k)
}

pub fn read_parcellation(path: &Path) -> Result<Parcellation> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parcellation_from_csv(&text, path)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub session_id: String,
    pub path: PathBuf,
}

/// Reads a `subject_id,session_id,path` manifest. Relative paths resolve
/// against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::format(path, e.to_string()))?
        .clone();
    let want = ["subject_id", "session_id", "path"];
    if headers.len() != 3 || headers.iter().zip(want).any(|(h, w)| h.trim() != w) {
        return Err(Error::format(
            path,
            "manifest header must be subject_id,session_id,path",
        ));
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::format(path, e.to_string()))?;
        let file = PathBuf::from(record[2].trim());
        out.push(ManifestEntry {
            subject_id: record[0].trim().to_string(),
            session_id: record[1].trim().to_string(),
            path: if file.is_absolute() {
                file
            } else {
                base.join(file)
            },
        });
    }
    if out.is_empty() {
        return Err(Error::format(path, "manifest lists no files"));
    }
    Ok(out)
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let result = fs::File::create(&tmp)
        .and_then(|mut f| {
            f.write_all(bytes)?;
            f.sync_all()
        })
        .and_then(|_| fs::rename(&tmp, path));
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn g17_matches_printf() {
        // Reference strings from C printf("%.17g").
        let cases = [
            (0.1, "0.10000000000000001"),
            (1.0, "1"),
            (-2.5, "-2.5"),
            (1e-5, "1.0000000000000001e-05"),
            (123456.0, "123456"),
            (1e17, "1e+17"),
            (0.0001, "0.0001"),
            (1.0 / 3.0, "0.33333333333333331"),
            (0.0, "0"),
        ];
        for (x, want) in cases {
            assert_eq!(format_g17(x), want, "formatting {x:e}");
        }
    }

    #[test]
    fn binary_header_layout() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let bytes = matrix_to_binary(&m);
        assert_eq!(&bytes[..4], b"SHPC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 16 + 48);
        assert_eq!(f64::from_le_bytes(bytes[16..24].try_into().unwrap()), 1.0);
        assert_eq!(f64::from_le_bytes(bytes[24..32].try_into().unwrap()), 2.0);
        assert!(matrix_from_binary(&bytes[..20], Path::new("x")).is_err());
        assert!(matrix_from_binary(b"NOPE0000000000000000", Path::new("x")).is_err());
    }

    #[test]
    fn csv_layout_and_errors() {
        let m = DMatrix::from_row_slice(2, 2, &[0.5, -1.0, 0.1, 2.0]);
        let text = matrix_to_csv(&m);
        assert_eq!(text, "c0,c1\n0.5,-1\n0.10000000000000001,2\n");
        assert!(matrix_from_csv("c0,c1\n1,2\n3\n", Path::new("x")).is_err());
        assert!(matrix_from_csv("c0\nabc\n", Path::new("x")).is_err());
    }

    #[test]
    fn parcellation_csv() {
        let p = Parcellation::new(vec![1, 0, 1], 2).unwrap();
        let text = parcellation_to_csv(&p);
        assert_eq!(text, "voxel_index,label\n0,1\n1,0\n2,1\n");
        assert_eq!(parcellation_from_csv(&text, Path::new("x")).unwrap(), p);
        assert!(parcellation_from_csv("voxel_index,label\n0,1\n2,0\n", Path::new("x")).is_err());
    }

    #[test]
    fn manifest_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        fs::write(&path, "subject_id,session_id,path\ns1,1,a.csv\n").unwrap();
        let m = read_manifest(&path).unwrap();
        assert_eq!(m[0].path, dir.path().join("a.csv"));
        fs::write(&path, "subject,session,file\ns1,1,a.csv\n").unwrap();
        assert!(read_manifest(&path).is_err());
    }

    proptest! {
        #[test]
        fn matrices_survive_both_formats(
            rows in 1usize..5,
            cols in 1usize..5,
            seed in proptest::collection::vec(-1e6f64..1e6, 25),
        ) {
            let m = DMatrix::from_fn(rows, cols, |r, c| seed[r * 5 + c] / 7.0);
            let csv = matrix_from_csv(&matrix_to_csv(&m), Path::new("x")).unwrap();
            let bin = matrix_from_binary(&matrix_to_binary(&m), Path::new("x")).unwrap();
            prop_assert_eq!(&csv, &m);
            prop_assert_eq!(&bin, &m);
        }
    }
}
