//! Headered delimited tables with missing values.
//!
//! A column is numeric when every non-missing cell parses as a number and
//! categorical otherwise. Empty cells and `NA`, `NaN`, `?` count as
//! missing.

use std::collections::BTreeSet;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Column {
    Numeric(Vec<Option<f64>>),
    Categorical(Vec<Option<String>>),
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Numeric(v) => v.len(),
            Column::Categorical(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_missing(&self, row: usize) -> bool {
        match self {
            Column::Numeric(v) => v[row].is_none(),
            Column::Categorical(v) => v[row].is_none(),
        }
    }

    pub fn n_missing(&self) -> usize {
        (0..self.len()).filter(|&i| self.is_missing(i)).count()
    }

    /// Non-missing numeric values in row order.
    pub fn present(&self) -> Vec<f64> {
        match self {
            Column::Numeric(v) => v.iter().flatten().copied().collect(),
            Column::Categorical(_) => Vec::new(),
        }
    }

    /// Distinct non-missing values rendered as text, sorted.
    pub fn levels(&self) -> Vec<String> {
        let set: BTreeSet<String> = match self {
            Column::Numeric(v) => v.iter().flatten().map(|x| format_number(*x)).collect(),
            Column::Categorical(v) => v.iter().flatten().cloned().collect(),
        };
        set.into_iter().collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    names: Vec<String>,
    columns: Vec<Column>,
    n_rows: usize,
}

impl Table {
    pub fn new(names: Vec<String>, columns: Vec<Column>) -> Result<Self> {
        if names.len() != columns.len() {
            return Err(Error::DimensionMismatch { expected: names.len(), got: columns.len() });
        }
        let unique: BTreeSet<&String> = names.iter().collect();
        if unique.len() != names.len() {
            return Err(Error::InvalidArgument("duplicate column names".into()));
        }
        let n_rows = columns.first().map_or(0, Column::len);
        if let Some(c) = columns.iter().find(|c| c.len() != n_rows) {
            return Err(Error::DimensionMismatch { expected: n_rows, got: c.len() });
        }
        Ok(Table { names, columns, n_rows })
    }

    pub fn read_csv(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let names: Vec<String> =
            rdr.headers().map_err(|e| Error::Parse(e.to_string()))?.iter().map(str::to_string).collect();
        let mut cells: Vec<Vec<Option<String>>> = vec![Vec::new(); names.len()];
        for (line, record) in rdr.records().enumerate() {
            let record = record.map_err(|e| Error::Parse(format!("row {}: {e}", line + 2)))?;
            if record.len() != names.len() {
                return Err(Error::Parse(format!(
                    "row {} has {} fields, expected {}",
                    line + 2,
                    record.len(),
                    names.len()
                )));
            }
            for (k, field) in record.iter().enumerate() {
                cells[k].push((!is_missing_token(field)).then(|| field.to_string()));
            }
        }
        let columns = cells
            .into_iter()
            .map(|col| {
                let parsed: Option<Vec<Option<f64>>> = col
                    .iter()
                    .map(|c| match c {
                        None => Some(None),
                        Some(s) => s.parse::<f64>().ok().filter(|v| v.is_finite()).map(Some),
                    })
                    .collect();
                match parsed {
                    Some(v) => Column::Numeric(v),
                    None => Column::Categorical(col),
                }
            })
            .collect();
        Table::new(names, columns)
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
        Self::read_csv(file)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_columns(&self) -> usize {
        self.columns.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.names.iter().position(|n| n == name).map(|i| &self.columns[i])
    }

    /// Splits off the named column.
    pub fn take(&self, name: &str) -> Result<(Table, Column)> {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::InvalidArgument(format!("no column named '{name}'")))?;
        let mut names = self.names.clone();
        let mut columns = self.columns.clone();
        names.remove(i);
        let col = columns.remove(i);
        Ok((Table { names, columns, n_rows: self.n_rows }, col))
    }

    /// Rows reordered by `order` (a permutation of row indices).
    pub fn permuted(&self, order: &[usize]) -> Table {
        let columns = self
            .columns
            .iter()
            .map(|c| match c {
                Column::Numeric(v) => Column::Numeric(order.iter().map(|&i| v[i]).collect()),
                Column::Categorical(v) => Column::Categorical(order.iter().map(|&i| v[i].clone()).collect()),
            })
            .collect();
        Table { names: self.names.clone(), columns, n_rows: order.len() }
    }
}

/// Learning-task view of a table: features plus a target and, for survival
/// data, event indicators.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Table,
    pub target: Column,
    /// Event indicator (1 = observed) when the target is a survival time.
    pub event: Option<Vec<Option<f64>>>,
}

impl Dataset {
    pub fn from_table(table: &Table, target: &str, event: Option<&str>) -> Result<Self> {
        let (features, target) = table.take(target)?;
        let (features, event) = match event {
            Some(name) => {
                let (f, e) = features.take(name)?;
                match e {
                    Column::Numeric(v) => (f, Some(v)),
                    Column::Categorical(_) => {
                        return Err(Error::InvalidArgument(format!("event column '{name}' is not numeric")))
                    }
                }
            }
            None => (features, None),
        };
        if features.n_rows() == 0 {
            return Err(Error::InsufficientData("dataset has no rows".into()));
        }
        Ok(Dataset { features, target, event })
    }
}

fn is_missing_token(s: &str) -> bool {
    matches!(s, "" | "NA" | "NaN" | "nan" | "?")
}

/// Shortest text that parses back to `x`; integers print without a point.
pub fn format_number(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 1e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_mixed_columns() {
        let t = Table::read_csv("a,b,c\n1,x,\n2.5,NA,3\n?,y,4\n".as_bytes()).unwrap();
        assert_eq!(t.n_rows(), 3);
        assert_eq!(t.column("a"), Some(&Column::Numeric(vec![Some(1.0), Some(2.5), None])));
        assert_eq!(t.column("b"), Some(&Column::Categorical(vec![Some("x".into()), None, Some("y".into())])));
        assert_eq!(t.column("c").unwrap().n_missing(), 1);
        assert_eq!(t.column("b").unwrap().levels(), vec!["x", "y"]);
    }

    #[test]
    fn rejects_ragged_rows() {
        assert!(Table::read_csv("a,b\n1,2\n3\n".as_bytes()).is_err());
    }

    #[test]
    fn dataset_splits_target_and_event() {
        let t = Table::read_csv("x,time,event\n1,5,1\n2,3,0\n".as_bytes()).unwrap();
        let d = Dataset::from_table(&t, "time", Some("event")).unwrap();
        assert_eq!(d.features.names(), &["x".to_string()]);
        assert_eq!(d.event, Some(vec![Some(1.0), Some(0.0)]));
        assert!(Dataset::from_table(&t, "nope", None).is_err());
    }
}
