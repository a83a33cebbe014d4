//! Small CSV helpers and the provenance header stamped on every output file.

use std::fmt::Write as _;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Parses a headered two-column numeric CSV. The header must match exactly
/// (after trimming); blank lines and `#` comment lines are skipped.
pub fn read_two_column_csv(text: &str, header: [&str; 2]) -> Result<Vec<(f64, f64)>> {
    let mut rows = Vec::new();
    let mut saw_header = false;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if !saw_header {
            if fields != header {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected header \"{}\", got \"{line}\"", header.join(",")),
                });
            }
            saw_header = true;
            continue;
        }
        if fields.len() != 2 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected 2 columns, got {}", fields.len()),
            });
        }
        let parse = |s: &str| -> Result<f64> {
            let v: f64 = s.parse().map_err(|_| Error::Parse {
                line: line_no,
                message: format!("not a number: \"{s}\""),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("non-finite value: \"{s}\""),
                });
            }
            Ok(v)
        };
        rows.push((parse(fields[0])?, parse(fields[1])?));
    }
    if !saw_header {
        return Err(Error::Parse {
            line: 1,
            message: format!("missing header \"{}\"", header.join(",")),
        });
    }
    Ok(rows)
}

/// Provenance stamped into every output: tool version, seed and a hash of the
/// fully resolved configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub seed: u64,
    pub config_sha256: String,
}

impl Provenance {
    pub fn new<T: Serialize>(config: &T, seed: u64) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            config_sha256: config_hash(config),
        }
    }

    /// Comment line preceding the CSV header row.
    pub fn csv_comment(&self) -> String {
        format!(
            "# {} {} seed={} config_sha256={}\n",
            self.tool, self.version, self.seed, self.config_sha256
        )
    }
}

/// Hex SHA-256 of the JSON serialization of `config`.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let json = serde_json::to_vec(config).expect("configuration serializes to JSON");
    let digest = Sha256::digest(&json);
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Renders a CSV document with an optional provenance comment.
pub fn render_csv<I, R>(provenance: Option<&Provenance>, header: &[&str], rows: I) -> String
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut out = String::new();
    if let Some(p) = provenance {
        out.push_str(&p.csv_comment());
    }
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        let cells: Vec<String> = row.into_iter().collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reports_line_numbers() {
        let text = "t,intensity\n0.0,1.0\n0.5,abc\n";
        match read_two_column_csv(text, ["t", "intensity"]) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let text = "t,intensity\n0.0,1.0,2.0\n";
        assert!(matches!(
            read_two_column_csv(text, ["t", "intensity"]),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            read_two_column_csv("t,intensity\n1.0,NaN\n", ["t", "intensity"]),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn skips_provenance_comment() {
        let text = "# bubblelink 0.1.0 seed=1\nt,intensity\n0,1\n";
        assert_eq!(read_two_column_csv(text, ["t", "intensity"]).unwrap(), vec![(0.0, 1.0)]);
    }

    #[test]
    fn hash_is_stable() {
        let a = config_hash(&serde_json::json!({"a": 1, "b": [1.5, 2.0]}));
        let b = config_hash(&serde_json::json!({"a": 1, "b": [1.5, 2.0]}));
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
    }
}
