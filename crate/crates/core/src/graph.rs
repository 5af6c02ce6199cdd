//! Undirected region network built from a grid partition or an edge list.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Result, StsError};

/// Cell adjacency rule for grid partitions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GridAdjacency {
    /// Cells sharing an edge.
    #[default]
    Rook,
    /// Cells sharing an edge or a corner.
    Queen,
}

/// Symmetric, loop-free region adjacency with sorted neighbor lists.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionGraph {
    n_regions: usize,
    adjacency: Vec<bool>,
    neighbors: Vec<Vec<usize>>,
    labels: Option<Vec<String>>,
    source: GraphSource,
}

/// How a graph was described; used to write it back out.
#[derive(Clone, Debug, PartialEq)]
pub enum GraphSource {
    Grid {
        rows: usize,
        cols: usize,
        adjacency: GridAdjacency,
    },
    Edges,
}

impl RegionGraph {
    fn from_edge_set(n: usize, edges: &BTreeSet<(usize, usize)>, source: GraphSource) -> Self {
        let mut adjacency = vec![false; n * n];
        let mut neighbors = vec![Vec::new(); n];
        for &(i, j) in edges {
            adjacency[i * n + j] = true;
            adjacency[j * n + i] = true;
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        RegionGraph {
            n_regions: n,
            adjacency,
            neighbors,
            labels: None,
            source,
        }
    }

    /// Rook-adjacency grid with row-major region indices.
    pub fn grid(rows: usize, cols: usize) -> Result<Self> {
        Self::grid_with(rows, cols, GridAdjacency::Rook)
    }

    pub fn grid_with(rows: usize, cols: usize, rule: GridAdjacency) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(StsError::Argument(format!(
                "grid dimensions must be positive, got {rows}x{cols}"
            )));
        }
        let mut edges = BTreeSet::new();
        let id = |r: usize, c: usize| r * cols + c;
        for r in 0..rows {
            for c in 0..cols {
                if c + 1 < cols {
                    edges.insert((id(r, c), id(r, c + 1)));
                }
                if r + 1 < rows {
                    edges.insert((id(r, c), id(r + 1, c)));
                }
                if rule == GridAdjacency::Queen && r + 1 < rows {
                    if c + 1 < cols {
                        edges.insert((id(r, c), id(r + 1, c + 1)));
                    }
                    if c > 0 {
                        edges.insert((id(r, c), id(r + 1, c - 1)));
                    }
                }
            }
        }
        Ok(Self::from_edge_set(
            rows * cols,
            &edges,
            GraphSource::Grid {
                rows,
                cols,
                adjacency: rule,
            },
        ))
    }

    /// Graph over `n` regions from an undirected edge list. Direction and
    /// duplicates in the input are irrelevant.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        if n == 0 {
            return Err(StsError::Argument("graph needs at least one region".into()));
        }
        let mut set = BTreeSet::new();
        for &(i, j) in edges {
            if i >= n || j >= n {
                return Err(StsError::Argument(format!(
                    "edge ({i}, {j}) references a region outside 0..{n}"
                )));
            }
            if i == j {
                return Err(StsError::Argument(format!("self-edge ({i}, {i}) is not allowed")));
            }
            set.insert((i.min(j), i.max(j)));
        }
        Ok(Self::from_edge_set(n, &set, GraphSource::Edges))
    }

    pub fn with_labels(mut self, labels: Vec<String>) -> Result<Self> {
        if labels.len() != self.n_regions {
            return Err(StsError::Argument(format!(
                "{} labels for {} regions",
                labels.len(),
                self.n_regions
            )));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn n_regions(&self) -> usize {
        self.n_regions
    }

    pub fn is_adjacent(&self, i: usize, j: usize) -> bool {
        self.adjacency[i * self.n_regions + j]
    }

    /// Row-major N×N adjacency matrix as 0/1 flags.
    pub fn adjacency(&self) -> &[bool] {
        &self.adjacency
    }

    /// Sorted neighbors of region `i`, never including `i` itself.
    pub fn neighbors(&self, i: usize) -> Result<&[usize]> {
        self.neighbors
            .get(i)
            .map(Vec::as_slice)
            .ok_or_else(|| {
                StsError::Argument(format!(
                    "region {i} out of range for graph with {} regions",
                    self.n_regions
                ))
            })
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn source(&self) -> &GraphSource {
        &self.source
    }

    pub fn edge_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Undirected edges `(i, j)` with `i < j`, in ascending order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.edge_count());
        for (i, list) in self.neighbors.iter().enumerate() {
            out.extend(list.iter().filter(|&&j| j > i).map(|&j| (i, j)));
        }
        out
    }

    /// Neighbor set plus the region itself when `self_loop` is set, sorted.
    pub fn support(&self, i: usize, self_loop: bool) -> Vec<usize> {
        let mut s = self.neighbors[i].clone();
        if self_loop {
            let pos = s.partition_point(|&j| j < i);
            s.insert(pos, i);
        }
        s
    }

    /// Applies a relabeling: region `i` of `self` becomes region `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.n_regions;
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(StsError::Argument("invalid region permutation".into()));
        }
        let edges: Vec<_> = self.edges().into_iter().map(|(i, j)| (perm[i], perm[j])).collect();
        Self::from_edges(n, &edges)
    }

    /// Parses the graph spec text format: `grid ROWS COLS` or `regions N`
    /// followed by `i j` edge lines. `#` starts a comment line.
    pub fn parse_spec(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
        let (lineno, header) = lines
            .next()
            .ok_or_else(|| StsError::Data("graph spec is empty".into()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let num = |s: &str, line: usize| -> Result<usize> {
            s.parse()
                .map_err(|_| StsError::Data(format!("graph spec line {line}: '{s}' is not an index")))
        };
        match fields.as_slice() {
            ["grid", rows, cols] => {
                let g = Self::grid(num(rows, lineno)?, num(cols, lineno)?)?;
                if let Some((l, _)) = lines.next() {
                    return Err(StsError::Data(format!(
                        "graph spec line {l}: grid specs take no edge lines"
                    )));
                }
                Ok(g)
            }
            ["grid", rows, cols, "queen"] => Self::grid_with(
                num(rows, lineno)?,
                num(cols, lineno)?,
                GridAdjacency::Queen,
            ),
            ["regions", n] => {
                let n = num(n, lineno)?;
                let mut edges = Vec::new();
                for (l, line) in lines {
                    let f: Vec<&str> = line.split_whitespace().collect();
                    if f.len() != 2 {
                        return Err(StsError::Data(format!(
                            "graph spec line {l}: expected 'i j', got '{line}'"
                        )));
                    }
                    edges.push((num(f[0], l)?, num(f[1], l)?));
                }
                Self::from_edges(n, &edges).map_err(|e| StsError::Data(e.to_string()))
            }
            _ => Err(StsError::Data(format!(
                "graph spec line {lineno}: expected 'grid ROWS COLS' or 'regions N', got '{header}'"
            ))),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| StsError::io(path.display().to_string(), e))?;
        Self::parse_spec(&text)
    }

    pub fn to_spec(&self) -> String {
        match self.source {
            GraphSource::Grid {
                rows,
                cols,
                adjacency: GridAdjacency::Rook,
            } => format!("grid {rows} {cols}\n"),
            GraphSource::Grid {
                rows,
                cols,
                adjacency: GridAdjacency::Queen,
            } => format!("grid {rows} {cols} queen\n"),
            GraphSource::Edges => {
                let mut s = format!("regions {}\n", self.n_regions);
                for (i, j) in self.edges() {
                    let _ = writeln!(s, "{i} {j}");
                }
                s
            }
        }
    }
}
