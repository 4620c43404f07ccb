use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::contrastive::cosine_sim;
use crate::error::{Error, Result};
use crate::grid::FeatureGrid;

/// Search window for positive matching: an odd side length, or the whole map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "WindowRepr", into = "WindowRepr")]
pub enum Window {
    Size(usize),
    Full,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum WindowRepr {
    Size(usize),
    Name(String),
}

impl TryFrom<WindowRepr> for Window {
    type Error = String;

    fn try_from(r: WindowRepr) -> std::result::Result<Self, String> {
        match r {
            WindowRepr::Size(k) => Window::size(k).map_err(|e| e.to_string()),
            WindowRepr::Name(s) => s.parse().map_err(|e: Error| e.to_string()),
        }
    }
}

impl From<Window> for WindowRepr {
    fn from(w: Window) -> Self {
        match w {
            Window::Size(k) => WindowRepr::Size(k),
            Window::Full => WindowRepr::Name("full".into()),
        }
    }
}

impl Window {
    pub fn size(k: usize) -> Result<Self> {
        if k % 2 == 1 {
            Ok(Window::Size(k))
        } else {
            Err(Error::invalid(format!("window size must be odd, got {k}")))
        }
    }

    /// In-bounds `(row, col)` cells around `(row, col)`, row-major.
    pub fn cells(self, height: usize, width: usize, row: usize, col: usize) -> Vec<(usize, usize)> {
        let (rows, cols) = match self {
            Window::Full => (0..height, 0..width),
            Window::Size(k) => {
                let r = k / 2;
                (
                    row.saturating_sub(r)..(row + r + 1).min(height),
                    col.saturating_sub(r)..(col + r + 1).min(width),
                )
            }
        };
        rows.flat_map(|m| cols.clone().map(move |n| (m, n))).collect()
    }
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Window::Size(k) => write!(f, "{k}"),
            Window::Full => f.write_str("full"),
        }
    }
}

impl FromStr for Window {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("full") {
            return Ok(Window::Full);
        }
        let k: usize = s
            .parse()
            .map_err(|_| Error::invalid(format!("window must be an odd integer or \"full\", got {s:?}")))?;
        Window::size(k)
    }
}

/// Similarity of `anchor[row, col]` to every in-window cell of `other`.
pub fn windowed_similarity(
    anchor: &FeatureGrid,
    other: &FeatureGrid,
    (row, col): (usize, usize),
    window: Window,
) -> Result<Vec<((usize, usize), f64)>> {
    if anchor.shape() != other.shape() {
        return Err(Error::ShapeMismatch(format!(
            "window search between {:?} and {:?}",
            anchor.shape(),
            other.shape()
        )));
    }
    if row >= anchor.height() || col >= anchor.width() {
        return Err(Error::invalid(format!(
            "position ({row}, {col}) outside a {}x{} map",
            anchor.height(),
            anchor.width()
        )));
    }
    let a = anchor.at(row, col);
    Ok(window
        .cells(other.height(), other.width(), row, col)
        .into_iter()
        .map(|(m, n)| ((m, n), cosine_sim(a, other.at(m, n))))
        .collect())
}

/// Argmax over a window; ties go to the cell nearest `center`, then to the
/// first in row-major order.
pub fn select_positive_index(
    similarities: &[((usize, usize), f64)],
    center: (usize, usize),
) -> Option<(usize, usize)> {
    let dist = |(m, n): (usize, usize)| {
        let dy = m as i64 - center.0 as i64;
        let dx = n as i64 - center.1 as i64;
        dy * dy + dx * dx
    };
    let mut best: Option<((usize, usize), f64)> = None;
    for &(cell, s) in similarities {
        best = match best {
            None => Some((cell, s)),
            Some((bc, bs)) => {
                let better = s > bs || (s == bs && (dist(cell), cell) < (dist(bc), bc));
                Some(if better { (cell, s) } else { (bc, bs) })
            }
        };
    }
    best.map(|(c, _)| c)
}
