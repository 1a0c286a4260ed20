use std::fs;
use std::io::Write as _;
use std::path::Path;

use super::{CorpusError, Result};

/// A versioned phoneme symbol table. Index = position in `symbols`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhonemeInventory {
    pub id: String,
    pub symbols: Vec<String>,
}

impl PhonemeInventory {
    pub fn index_of(&self, symbol: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s == symbol)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }
}

/// Phoneme indices in temporal order, tied to the inventory that defines
/// them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhonemeSequence {
    pub symbols: Vec<usize>,
    pub inventory_id: String,
}

/// One phone interval of a forced alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentRow {
    pub symbol: String,
    pub start_s: f64,
    pub end_s: f64,
}

fn io_err(path: &Path, source: std::io::Error) -> CorpusError {
    CorpusError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Parses a tab-separated alignment file: one `(symbol, start_s, end_s)` row
/// per phone, time-ordered and non-overlapping.
pub fn load_alignment_rows(path: &Path) -> Result<Vec<AlignmentRow>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let display = path.display().to_string();
    let mut rows: Vec<AlignmentRow> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(CorpusError::MalformedRow {
                path: display,
                line: lineno,
                detail: format!("expected 3 tab-separated fields, got {}", fields.len()),
            });
        }
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|_| CorpusError::MalformedRow {
                path: display.clone(),
                line: lineno,
                detail: format!("bad {what} {s:?}"),
            })
        };
        let row = AlignmentRow {
            symbol: fields[0].to_string(),
            start_s: parse(fields[1], "start time")?,
            end_s: parse(fields[2], "end time")?,
        };
        if !(row.end_s > row.start_s) {
            return Err(CorpusError::Overlap {
                path: display,
                line: lineno,
            });
        }
        if let Some(prev) = rows.last() {
            if row.start_s < prev.end_s {
                return Err(CorpusError::Overlap {
                    path: display,
                    line: lineno,
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CorpusError::EmptyAlignment { path: display });
    }
    Ok(rows)
}

/// Loads an alignment and maps its symbols through `inventory`, yielding the
/// phoneme index sequence (silence included as its own index).
pub fn load_alignment(path: &Path, inventory: &PhonemeInventory) -> Result<PhonemeSequence> {
    let rows = load_alignment_rows(path)?;
    let mut symbols = Vec::with_capacity(rows.len());
    for row in &rows {
        let idx = inventory
            .index_of(&row.symbol)
            .ok_or_else(|| CorpusError::UnknownSymbol {
                symbol: row.symbol.clone(),
                inventory_id: inventory.id.clone(),
            })?;
        symbols.push(idx);
    }
    Ok(PhonemeSequence {
        symbols,
        inventory_id: inventory.id.clone(),
    })
}

pub fn write_alignment(path: &Path, rows: &[AlignmentRow]) -> Result<()> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&format!(
            "{}\t{:.6}\t{:.6}\n",
            row.symbol, row.start_s, row.end_s
        ));
    }
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// Inventory file: a `#inventory: <id>` header, then one symbol per line.
pub fn load_inventory(path: &Path) -> Result<PhonemeInventory> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let display = path.display().to_string();
    let mut lines = text.lines().enumerate();
    let id = match lines.next() {
        Some((_, header)) if header.starts_with("#inventory:") => {
            header["#inventory:".len()..].trim().to_string()
        }
        _ => {
            return Err(CorpusError::MalformedRow {
                path: display,
                line: 1,
                detail: "missing '#inventory: <id>' header".into(),
            })
        }
    };
    let mut symbols = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        if symbols.iter().any(|s: &String| s == line) {
            return Err(CorpusError::MalformedRow {
                path: display,
                line: i + 1,
                detail: format!("duplicate symbol {line:?}"),
            });
        }
        symbols.push(line.to_string());
    }
    if symbols.is_empty() {
        return Err(CorpusError::EmptyAlignment { path: display });
    }
    Ok(PhonemeInventory { id, symbols })
}

pub fn write_inventory(path: &Path, inventory: &PhonemeInventory) -> Result<()> {
    let mut out = format!("#inventory: {}\n", inventory.id);
    for s in &inventory.symbols {
        out.push_str(s);
        out.push('\n');
    }
    let mut file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inventory() -> PhonemeInventory {
        PhonemeInventory {
            id: "test-v1".into(),
            symbols: vec!["sil".into(), "AH".into(), "B".into()],
        }
    }

    #[test]
    fn parses_symbols_in_temporal_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.tsv");
        fs::write(&path, "AH\t0.00\t0.10\nB\t0.10\t0.25\n").unwrap();
        let seq = load_alignment(&path, &inventory()).unwrap();
        assert_eq!(seq.symbols, vec![1, 2]);
        assert_eq!(seq.inventory_id, "test-v1");
    }

    #[test]
    fn overlapping_rows_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.tsv");
        fs::write(&path, "AH\t0.00\t0.10\nB\t0.05\t0.25\n").unwrap();
        assert!(matches!(
            load_alignment_rows(&path),
            Err(CorpusError::Overlap { line: 2, .. })
        ));
    }

    #[test]
    fn empty_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.tsv");
        fs::write(&path, "").unwrap();
        assert!(matches!(
            load_alignment_rows(&path),
            Err(CorpusError::EmptyAlignment { .. })
        ));
    }

    #[test]
    fn malformed_rows_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.tsv");
        fs::write(&path, "AH\t0.00\t0.10\nB\tzero\t0.25\n").unwrap();
        match load_alignment_rows(&path) {
            Err(CorpusError::MalformedRow { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_symbols_are_named() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.tsv");
        fs::write(&path, "ZH\t0.00\t0.10\n").unwrap();
        let err = load_alignment(&path, &inventory()).unwrap_err();
        assert!(err.to_string().contains("ZH"), "{err}");
    }

    #[test]
    fn zero_length_interval_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.tsv");
        fs::write(&path, "AH\t0.10\t0.10\n").unwrap();
        assert!(matches!(
            load_alignment_rows(&path),
            Err(CorpusError::Overlap { .. })
        ));
    }

    #[test]
    fn alignment_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.tsv");
        let rows = vec![
            AlignmentRow {
                symbol: "sil".into(),
                start_s: 0.0,
                end_s: 0.08,
            },
            AlignmentRow {
                symbol: "AH".into(),
                start_s: 0.08,
                end_s: 0.2,
            },
        ];
        write_alignment(&path, &rows).unwrap();
        let back = load_alignment_rows(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in rows.iter().zip(&back) {
            assert_eq!(a.symbol, b.symbol);
            assert!((a.start_s - b.start_s).abs() < 1e-9);
            assert!((a.end_s - b.end_s).abs() < 1e-9);
        }
    }

    #[test]
    fn inventory_round_trip_and_duplicate_detection() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("inv.txt");
        let inv = inventory();
        write_inventory(&path, &inv).unwrap();
        assert_eq!(load_inventory(&path).unwrap(), inv);

        fs::write(&path, "#inventory: x\nAH\nAH\n").unwrap();
        assert!(load_inventory(&path).is_err());
        fs::write(&path, "AH\nB\n").unwrap();
        assert!(load_inventory(&path).is_err());
    }
}
