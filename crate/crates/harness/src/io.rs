//! Output files and the trajectory CSV reader.
//!
//! Every CSV written here starts with one `# generated: ...` line carrying
//! the wall-clock time; the rest of the file is a deterministic function of
//! the configuration and seeds. Readers skip `#` lines.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use supermarket::meanfield::Trajectory;
use supermarket::ShiftedState;

use crate::error::{HarnessError, Result};

/// Version tag embedded in every output.
pub const VERSION: &str = concat!("supermarket-harness v", env!("CARGO_PKG_VERSION"));

pub const GENERATED_PREFIX: &str = "# generated:";

pub fn generated_line() -> String {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("{GENERATED_PREFIX} unix={secs} version={VERSION}")
}

/// The file with its `# generated:` lines removed, for determinism checks.
pub fn strip_generated(text: &str) -> String {
    text.lines()
        .filter(|l| !l.starts_with(GENERATED_PREFIX))
        .map(|l| format!("{l}\n"))
        .collect()
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| HarnessError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| HarnessError::io(path, e.into()))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| HarnessError::io(path, e))
}

/// Writes `t,x_1..x_n` with a leading `# generated:` line.
pub fn write_trajectory(path: &Path, traj: &Trajectory, grid: Option<usize>) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "{}", generated_line())
        .and_then(|_| traj.write_csv(&mut w, grid))
        .and_then(|_| w.flush())
        .map_err(|e| HarnessError::io(path, e))
}

/// A trajectory read back from CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryTable {
    pub n: usize,
    pub times: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
}

impl TrajectoryTable {
    pub fn state(&self, i: usize) -> ShiftedState {
        ShiftedState::new(self.rows[i].clone())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Parses the `t,x_1..x_n` layout. Times must be finite and strictly
/// increasing, every value finite, and every row complete.
pub fn read_trajectory<R: Read>(r: R) -> std::result::Result<TrajectoryTable, String> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(r);
    let header = rdr.headers().map_err(|e| e.to_string())?.clone();
    if header.get(0) != Some("t") {
        return Err("first column must be t".into());
    }
    let n = header.len() - 1;
    if n == 0 {
        return Err("no state columns".into());
    }
    for (k, name) in header.iter().enumerate().skip(1) {
        if name != format!("x_{k}") {
            return Err(format!("column {} should be x_{k}, found {name:?}", k + 1));
        }
    }
    let mut table = TrajectoryTable {
        n,
        times: Vec::new(),
        rows: Vec::new(),
    };
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| e.to_string())?;
        let mut vals = Vec::with_capacity(n + 1);
        for field in rec.iter() {
            let v: f64 = field
                .parse()
                .map_err(|_| format!("row {}: not a number: {field:?}", i + 1))?;
            if !v.is_finite() {
                return Err(format!("row {}: non-finite value", i + 1));
            }
            vals.push(v);
        }
        let t = vals[0];
        if let Some(&prev) = table.times.last() {
            if t <= prev {
                return Err(format!("row {}: time {t} does not increase", i + 1));
            }
        }
        table.times.push(t);
        table.rows.push(vals.split_off(1));
    }
    Ok(table)
}

pub fn read_trajectory_file(path: &Path) -> Result<TrajectoryTable> {
    let f = File::open(path).map_err(|e| HarnessError::io(path, e))?;
    read_trajectory(f).map_err(|msg| HarnessError::Parse {
        path: path.to_path_buf(),
        msg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use supermarket::meanfield::{integrate, IntegratorConfig};

    #[test]
    fn reads_written_trajectory_exactly() {
        let x0 = ShiftedState::new(vec![0.2, 0.05, 0.0]);
        let cfg = IntegratorConfig {
            t_max: Some(5.0),
            ..Default::default()
        };
        let traj = integrate(&x0, 0.5, 3, &cfg).unwrap();
        let mut buf = Vec::new();
        writeln!(buf, "{}", generated_line()).unwrap();
        traj.write_csv(&mut buf, None).unwrap();
        let table = read_trajectory(buf.as_slice()).unwrap();
        assert_eq!(table.n, 3);
        assert_eq!(table.times, traj.times());
        for (i, row) in table.rows.iter().enumerate() {
            assert_eq!(row.as_slice(), traj.state(i).as_slice());
        }
    }

    #[test]
    fn rejects_malformed() {
        let cases = [
            "",
            "x_1,x_2\n",
            "t\n0\n",
            "t,x_2\n0,1\n",
            "t,x_1\n0,1,2\n",
            "t,x_1\n0\n",
            "t,x_1\n0,abc\n",
            "t,x_1\n0,inf\n",
            "t,x_1\n1,0\n1,0\n",
        ];
        for c in cases {
            assert!(read_trajectory(c.as_bytes()).is_err(), "{c:?}");
        }
    }

    #[test]
    fn comments_and_spaces() {
        let text = "# generated: x\nt, x_1\n0, 0.5\n# note\n1, 0.25\n";
        let table = read_trajectory(text.as_bytes()).unwrap();
        assert_eq!(table.times, vec![0.0, 1.0]);
        assert_eq!(table.rows, vec![vec![0.5], vec![0.25]]);
    }

    #[test]
    fn strip_removes_only_generated() {
        let text = "# generated: unix=1\nt,x_1\n# other\n0,1\n";
        assert_eq!(strip_generated(text), "t,x_1\n# other\n0,1\n");
    }
}
