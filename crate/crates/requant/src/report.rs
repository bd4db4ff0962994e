//! Tab-separated report tables.

use std::fmt::Write as _;
use std::path::Path;

use crate::checkpoint::write_file;
use crate::error::Result;

/// One table: a header row and string cells. Floats are written in their
/// shortest round-trip form.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

pub trait Cell {
    fn cell(&self) -> String;
}

impl Cell for f64 {
    fn cell(&self) -> String {
        format!("{self:e}")
    }
}

impl Cell for f32 {
    fn cell(&self) -> String {
        format!("{self:e}")
    }
}

impl<T: Cell> Cell for Option<T> {
    fn cell(&self) -> String {
        self.as_ref().map_or_else(|| "NA".into(), Cell::cell)
    }
}

macro_rules! display_cells {
    ($($t:ty),*) => {$(
        impl Cell for $t {
            fn cell(&self) -> String {
                self.to_string()
            }
        }
    )*};
}
display_cells!(usize, u64, u32, u8, bool, String, &str);

/// Builds a row from heterogeneous cells.
#[macro_export]
macro_rules! row {
    ($($c:expr),* $(,)?) => {
        vec![$($crate::report::Cell::cell(&$c)),*]
    };
}

impl Table {
    pub fn new(name: &str, columns: &[&str]) -> Self {
        Table {
            name: name.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.columns.len(), "row width of table {}", self.name);
        self.rows.push(row);
    }

    pub fn render(&self, config_hash: &str) -> String {
        let mut s = String::new();
        writeln!(s, "# config-hash\t{config_hash}").unwrap();
        writeln!(s, "{}", self.columns.join("\t")).unwrap();
        for r in &self.rows {
            writeln!(s, "{}", r.join("\t")).unwrap();
        }
        s
    }

    pub fn write(&self, dir: &Path, config_hash: &str) -> Result<()> {
        write_file(
            &dir.join(format!("{}.tsv", self.name)),
            self.render(config_hash).as_bytes(),
        )
    }

    /// Cell of the first row whose first column equals `key`.
    pub fn lookup(&self, key: &str, column: &str) -> Option<&str> {
        let c = self.columns.iter().position(|x| x == column)?;
        self.rows.iter().find(|r| r[0] == key).map(|r| r[c].as_str())
    }
}

/// Parses a rendered table back into its hash, header and rows.
pub fn parse_tsv(text: &str) -> Option<(String, Vec<String>, Vec<Vec<String>>)> {
    let mut lines = text.lines();
    let hash = lines.next()?.strip_prefix("# config-hash\t")?.to_string();
    let header: Vec<String> = lines.next()?.split('\t').map(String::from).collect();
    let rows = lines.map(|l| l.split('\t').map(String::from).collect()).collect();
    Some((hash, header, rows))
}
