//! Persistence: binary field dumps, CSV tables, and JSON reports.
//!
//! Scalar fields travel in a small self-describing container. The header is
//! 24 bytes — the magic `"TFWF"`, a format version, the grid size `n`, a
//! reserved word (zero), and the cell length `L` as an IEEE double — followed
//! by the `n^3` samples as little-endian doubles in grid index order. Every
//! bit of the payload is preserved: [`store_field`] followed by
//! [`load_field`] reproduces the field exactly, and storing it again
//! reproduces the file byte for byte.
//!
//! [`write_report`] lays an experiment report out on disk: curves as CSV
//! files, fields as `.tfwf` dumps, and a `report.json` that references every
//! artifact with its SHA-256 content hash.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Result, TfwError};
use crate::experiments::ExperimentReport;
use crate::field::ScalarField;
use crate::grid::Grid;
use crate::site_energy::ForceMatrixRow;

/// Leading bytes of every field file.
pub const FIELD_MAGIC: [u8; 4] = *b"TFWF";
/// Version written by this build; loading any other version is an error.
pub const FIELD_VERSION: u32 = 1;
/// Bytes before the first sample.
pub const FIELD_HEADER_LEN: usize = 24;

/// Write a field to `path` in the binary container format.
pub fn store_field(path: &Path, field: &ScalarField) -> Result<()> {
    let grid = field.grid;
    let mut bytes = Vec::with_capacity(FIELD_HEADER_LEN + 8 * field.data.len());
    bytes.extend_from_slice(&FIELD_MAGIC);
    bytes.extend_from_slice(&FIELD_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(grid.n as u32).to_le_bytes());
    bytes.extend_from_slice(&0u32.to_le_bytes());
    bytes.extend_from_slice(&grid.l.to_le_bytes());
    for v in &field.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Read a field written by [`store_field`].
///
/// Malformed input is rejected with the byte offset where parsing failed;
/// for truncated files that offset is the file length.
pub fn load_field(path: &Path) -> Result<ScalarField> {
    let bytes = fs::read(path)?;
    let len = bytes.len();
    if len >= 4 && bytes[..4] != FIELD_MAGIC {
        return Err(TfwError::FormatError {
            offset: 0,
            what: format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..4]),
                "TFWF"
            ),
        });
    }
    if len < FIELD_HEADER_LEN {
        return Err(TfwError::FormatError {
            offset: len as u64,
            what: format!("truncated header: need {FIELD_HEADER_LEN} bytes, file has {len}"),
        });
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = word(4);
    if version != FIELD_VERSION {
        return Err(TfwError::VersionMismatch { found: version, expected: FIELD_VERSION });
    }
    let n = word(8) as usize;
    let reserved = word(12);
    if reserved != 0 {
        return Err(TfwError::FormatError {
            offset: 12,
            what: format!("reserved word must be zero, got {reserved}"),
        });
    }
    let l = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let expected = (n as u128).pow(3) * 8;
    let have = (len - FIELD_HEADER_LEN) as u128;
    if have < expected {
        return Err(TfwError::FormatError {
            offset: len as u64,
            what: format!("truncated payload: need {expected} bytes after the header, found {have}"),
        });
    }
    if have > expected {
        return Err(TfwError::FormatError {
            offset: FIELD_HEADER_LEN as u64 + expected as u64,
            what: format!("{} trailing bytes after the payload", have - expected),
        });
    }
    let grid = Grid::new(n, l)?;
    let mut out = ScalarField::zeros(grid);
    for (v, chunk) in out.data.iter_mut().zip(bytes[FIELD_HEADER_LEN..].chunks_exact(8)) {
        *v = f64::from_le_bytes(chunk.try_into().unwrap());
    }
    Ok(out)
}

/// Lowercase hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Lowercase hex SHA-256 of a file's contents.
pub fn hash_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// CSV table of per-site energies, schema `j,x,y,z,E_j`.
pub fn site_energy_csv(coords: &[[f64; 3]], energies: &[f64]) -> String {
    assert_eq!(coords.len(), energies.len(), "one energy per nucleus");
    let mut csv = String::from("j,x,y,z,E_j\n");
    for (j, (c, e)) in coords.iter().zip(energies).enumerate() {
        csv.push_str(&format!("{j},{},{},{},{e}\n", c[0], c[1], c[2]));
    }
    csv
}

/// CSV table of site-force entries, schema `j,k,distance,value,method`.
///
/// Each row of the matrix contributes one line per site `j`; `distance` is
/// the minimum-image distance between site `j` and the moved nucleus `k`.
pub fn force_csv(grid: &Grid, coords: &[[f64; 3]], rows: &[ForceMatrixRow]) -> String {
    let mut csv = String::from("j,k,distance,value,method\n");
    for row in rows {
        for (j, value) in row.entries.iter().enumerate() {
            let distance = grid.min_distance(coords[j], coords[row.k]);
            csv.push_str(&format!(
                "{j},{},{distance},{value},{}\n",
                row.k,
                row.method.as_str()
            ));
        }
    }
    csv
}

/// Write an experiment report and its artifacts under `dir`.
///
/// Curves become `curve_<name>.csv`, attached fields become `<name>.tfwf`,
/// and `report.json` carries the report body with the curve entries replaced
/// by file names plus an `artifacts` map from file name to SHA-256 content
/// hash. Returns the path of `report.json`.
pub fn write_report(dir: &Path, report: &ExperimentReport) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut artifacts = BTreeMap::<String, String>::new();
    let mut curve_files = BTreeMap::<String, String>::new();
    for (name, csv) in &report.curves {
        let file = format!("curve_{name}.csv");
        fs::write(dir.join(&file), csv.as_bytes())?;
        artifacts.insert(file.clone(), sha256_hex(csv.as_bytes()));
        curve_files.insert(name.clone(), file);
    }
    for (name, field) in &report.fields {
        let file = format!("{name}.tfwf");
        let path = dir.join(&file);
        store_field(&path, field)?;
        artifacts.insert(file.clone(), hash_file(&path)?);
    }
    for (file, text) in &report.attachments {
        if file == "report.json" {
            return Err(TfwError::BadConfig(
                "attachment may not shadow report.json".into(),
            ));
        }
        fs::write(dir.join(file), text.as_bytes())?;
        artifacts.insert(file.clone(), sha256_hex(text.as_bytes()));
    }
    let mut doc = serde_json::to_value(report)?;
    let body = doc.as_object_mut().expect("a report serializes to an object");
    body.insert("curves".into(), serde_json::to_value(&curve_files)?);
    body.insert("artifacts".into(), serde_json::to_value(&artifacts)?);
    let path = dir.join("report.json");
    fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n")?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field() -> ScalarField {
        let grid = Grid::new(8, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut f = ScalarField::zeros(grid);
        for v in &mut f.data {
            *v = rng.gen_range(-1.0..1.0);
        }
        f
    }

    #[test]
    fn storing_then_loading_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let field = random_field();
        let first = dir.path().join("f.tfwf");
        store_field(&first, &field).unwrap();
        let loaded = load_field(&first).unwrap();
        assert_eq!(loaded.grid, field.grid);
        for (a, b) in loaded.data.iter().zip(&field.data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let second = dir.path().join("g.tfwf");
        store_field(&second, &loaded).unwrap();
        assert_eq!(fs::read(&first).unwrap(), fs::read(&second).unwrap());
    }

    #[test]
    fn truncation_reports_the_file_length() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.tfwf");
        store_field(&path, &random_field()).unwrap();
        let bytes = fs::read(&path).unwrap();
        for cut in [10usize, 100] {
            fs::write(&path, &bytes[..cut]).unwrap();
            match load_field(&path) {
                Err(TfwError::FormatError { offset, .. }) => assert_eq!(offset, cut as u64),
                other => panic!("expected a format error, got {other:?}"),
            }
        }
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.tfwf");
        store_field(&path, &random_field()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 9;
        fs::write(&path, &bytes).unwrap();
        match load_field(&path) {
            Err(TfwError::VersionMismatch { found, expected }) => {
                assert_eq!((found, expected), (9, FIELD_VERSION));
            }
            other => panic!("expected a version mismatch, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_trailing_bytes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.tfwf");
        store_field(&path, &random_field()).unwrap();
        let good = fs::read(&path).unwrap();

        let mut corrupt = good.clone();
        corrupt[0] = b'X';
        fs::write(&path, &corrupt).unwrap();
        match load_field(&path) {
            Err(TfwError::FormatError { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected a format error, got {other:?}"),
        }

        let mut padded = good;
        padded.push(0);
        fs::write(&path, &padded).unwrap();
        match load_field(&path) {
            Err(TfwError::FormatError { offset, what }) => {
                assert_eq!(offset, (FIELD_HEADER_LEN + 8 * 8 * 8 * 8) as u64);
                assert!(what.contains("trailing"));
            }
            other => panic!("expected a format error, got {other:?}"),
        }
    }

    #[test]
    fn sha256_matches_a_known_vector() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn site_energy_table_has_one_line_per_nucleus() {
        let csv = site_energy_csv(&[[0.0, 0.5, 1.0], [2.0, 2.5, 3.0]], &[1.25, -0.75]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "j,x,y,z,E_j");
        assert_eq!(lines[1], "0,0,0.5,1,1.25");
        assert_eq!(lines[2], "1,2,2.5,3,-0.75");
        assert_eq!(lines.len(), 3);
    }

    #[test]
    fn report_files_match_their_recorded_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let mut report = ExperimentReport::new("demo");
        report.curves.insert("psi".into(), "r,max_abs,mean,count\n1,2,3,4\n".into());
        report.fields.insert("w".into(), random_field());
        report.attachments.insert("config.json".into(), "{}\n".into());
        let path = write_report(dir.path(), &report).unwrap();

        let doc: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(doc["curves"]["psi"], "curve_psi.csv");
        let artifacts = doc["artifacts"].as_object().unwrap();
        assert_eq!(artifacts.len(), 3);
        for (file, recorded) in artifacts {
            let on_disk = hash_file(&dir.path().join(file)).unwrap();
            assert_eq!(recorded.as_str().unwrap(), on_disk, "{file}");
        }
    }
}
