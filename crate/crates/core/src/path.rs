//! Coarse-grid trajectories and their CSV form.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Time-major trajectory on a uniform coarse grid of step `dt`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoarsePath {
    pub dt: f64,
    pub states: Vec<Vec<f64>>,
}

impl CoarsePath {
    pub fn new(dt: f64, states: Vec<Vec<f64>>) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::Config(format!("dt must be positive, got {dt}")));
        }
        if let Some(first) = states.first() {
            let d = first.len();
            if let Some(bad) = states.iter().find(|s| s.len() != d) {
                return Err(Error::DimMismatch {
                    expected: d,
                    got: bad.len(),
                });
            }
        }
        Ok(CoarsePath { dt, states })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    /// `x_k − x_{k−1}` for `k = 1..len`.
    pub fn increments(&self) -> Vec<Vec<f64>> {
        increments(&self.states)
    }

    /// Restriction to the coordinates in `cols`.
    pub fn slice_coords(&self, cols: &[usize]) -> CoarsePath {
        CoarsePath {
            dt: self.dt,
            states: self
                .states
                .iter()
                .map(|s| cols.iter().map(|&c| s[c]).collect())
                .collect(),
        }
    }

    pub fn window(&self, start: usize, end: usize) -> CoarsePath {
        CoarsePath {
            dt: self.dt,
            states: self.states[start..end].to_vec(),
        }
    }
}

pub fn increments(states: &[Vec<f64>]) -> Vec<Vec<f64>> {
    states
        .windows(2)
        .map(|w| w[1].iter().zip(&w[0]).map(|(b, a)| b - a).collect())
        .collect()
}

/// 17 significant digits: exact decimal round trip for `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes `path_id,t_index,x0,x1,…` rows with a header.
pub fn write_paths_csv<W: Write>(mut w: W, paths: &[CoarsePath]) -> Result<()> {
    let d = paths.first().map_or(0, CoarsePath::dim);
    write!(w, "path_id,t_index")?;
    for k in 0..d {
        write!(w, ",x{k}")?;
    }
    writeln!(w)?;
    for (pid, p) in paths.iter().enumerate() {
        for (t, s) in p.states.iter().enumerate() {
            write!(w, "{pid},{t}")?;
            for v in s {
                write!(w, ",{}", fmt_f64(*v))?;
            }
            writeln!(w)?;
        }
    }
    Ok(())
}

/// Reads the format of [`write_paths_csv`]. Rows of one path must be
/// contiguous and ordered by `t_index`.
pub fn read_paths_csv<R: BufRead>(r: R, dt: f64) -> Result<Vec<CoarsePath>> {
    let mut paths: Vec<CoarsePath> = Vec::new();
    let mut current: Option<usize> = None;
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let bad = || Error::Parse(format!("line {}: {line}", lineno + 1));
        let pid: usize = fields.next().and_then(|f| f.trim().parse().ok()).ok_or_else(bad)?;
        let t: usize = fields.next().and_then(|f| f.trim().parse().ok()).ok_or_else(bad)?;
        let coords: Vec<f64> = fields
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad())?;
        if current != Some(pid) {
            paths.push(CoarsePath {
                dt,
                states: Vec::new(),
            });
            current = Some(pid);
        }
        let p = paths.last_mut().expect("pushed above");
        if t != p.states.len() {
            return Err(Error::Parse(format!(
                "line {}: expected t_index {}, got {t}",
                lineno + 1,
                p.states.len()
            )));
        }
        p.states.push(coords);
    }
    for p in &paths {
        CoarsePath::new(p.dt, p.states.clone())?;
    }
    Ok(paths)
}
