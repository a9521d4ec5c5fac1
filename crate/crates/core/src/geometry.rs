//! Point supports, fine areal supports, aggregated regions, and adjacency.
//!
//! Areal units carry explicit uniform sample clouds; every spatial integral
//! downstream is a Monte Carlo average over these clouds, since general areal
//! units admit no closed-form integrals. All types are immutable after
//! construction and safe to share across threads.

use crate::error::{CageError, Result};
use crate::rng;
use rand::Rng;

/// An axis-aligned box in `d` dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Rect {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Rect {
    pub fn new(min: Vec<f64>, max: Vec<f64>) -> Result<Self> {
        if min.is_empty() || min.len() != max.len() {
            return Err(CageError::InvalidGeometry(
                "bounding box must have matching, nonempty min/max".into(),
            ));
        }
        for (lo, hi) in min.iter().zip(&max) {
            if !lo.is_finite() || !hi.is_finite() || hi <= lo {
                return Err(CageError::InvalidGeometry(format!(
                    "degenerate bounding box: [{lo}, {hi}]"
                )));
            }
        }
        Ok(Rect { min, max })
    }

    pub fn unit_square() -> Self {
        Rect { min: vec![0.0, 0.0], max: vec![1.0, 1.0] }
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    /// Lebesgue measure of the box.
    pub fn volume(&self) -> f64 {
        self.min.iter().zip(&self.max).map(|(lo, hi)| hi - lo).product()
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.len() == self.dim()
            && p.iter()
                .zip(self.min.iter().zip(&self.max))
                .all(|(x, (lo, hi))| *x >= *lo && *x <= *hi)
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.min
            .iter()
            .zip(&self.max)
            .map(|(lo, hi)| lo + (hi - lo) * rng.random::<f64>())
            .collect()
    }
}

/// A point in the spatial domain.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSite {
    pub coords: Vec<f64>,
}

impl PointSite {
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        if coords.is_empty() || coords.iter().any(|c| !c.is_finite()) {
            return Err(CageError::InvalidGeometry(
                "point coordinates must be finite and nonempty".into(),
            ));
        }
        Ok(PointSite { coords })
    }
}

pub fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// One fine areal unit: an index, a centroid, a Lebesgue area, and a cloud of
/// uniform interior sample points.
#[derive(Debug, Clone)]
pub struct ArealUnit {
    pub id: usize,
    pub centroid: Vec<f64>,
    pub area: f64,
    pub samples: Vec<PointSite>,
}

/// Symmetric 0/1 adjacency over `n` units, stored as sorted neighbor lists.
#[derive(Debug, Clone)]
pub struct Adjacency {
    n: usize,
    neighbors: Vec<Vec<usize>>,
}

impl Adjacency {
    pub fn empty(n: usize) -> Self {
        Adjacency { n, neighbors: vec![Vec::new(); n] }
    }

    pub fn from_pairs(n: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in pairs {
            if a >= n || b >= n {
                return Err(CageError::InvalidInput(format!(
                    "adjacency pair ({a},{b}) out of range for {n} units"
                )));
            }
            if a == b {
                continue; // zero diagonal
            }
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for list in &mut neighbors {
            list.sort_unstable();
            list.dedup();
        }
        Ok(Adjacency { n, neighbors })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn is_adjacent(&self, i: usize, j: usize) -> bool {
        self.neighbors[i].binary_search(&j).is_ok()
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, list) in self.neighbors.iter().enumerate() {
            for &j in list {
                if i < j {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Dense symmetric 0/1 matrix with zero diagonal.
    pub fn to_dense(&self) -> nalgebra::DMatrix<f64> {
        let mut m = nalgebra::DMatrix::zeros(self.n, self.n);
        for (i, list) in self.neighbors.iter().enumerate() {
            for &j in list {
                m[(i, j)] = 1.0;
            }
        }
        m
    }
}

/// How unit geometry was defined. Grid-backed supports can locate arbitrary
/// points and emit cell rectangles; irregular supports (ingested from CSV)
/// cannot.
#[derive(Debug, Clone)]
pub enum SupportGeometry {
    Grid { nx: usize, ny: usize, bbox: Rect },
    Irregular,
}

/// The finest areal support: an ordered list of disjoint units plus adjacency.
#[derive(Debug, Clone)]
pub struct FineSupport {
    pub units: Vec<ArealUnit>,
    pub adjacency: Adjacency,
    pub bbox: Rect,
    pub geometry: SupportGeometry,
}

impl FineSupport {
    pub fn from_parts(
        units: Vec<ArealUnit>,
        adjacency: Adjacency,
        bbox: Rect,
        geometry: SupportGeometry,
    ) -> Result<Self> {
        if units.is_empty() {
            return Err(CageError::InvalidGeometry("support has no units".into()));
        }
        if adjacency.len() != units.len() {
            return Err(CageError::InvalidInput(format!(
                "adjacency over {} units but support has {}",
                adjacency.len(),
                units.len()
            )));
        }
        for (idx, u) in units.iter().enumerate() {
            if u.id != idx {
                return Err(CageError::InvalidInput(format!(
                    "unit ids must be 0..n_B-1 in order; found {} at position {idx}",
                    u.id
                )));
            }
            if !(u.area > 0.0) {
                return Err(CageError::InvalidGeometry(format!(
                    "unit {idx} has nonpositive area {}",
                    u.area
                )));
            }
            if u.samples.is_empty() {
                return Err(CageError::InvalidGeometry(format!(
                    "unit {idx} has an empty sample cloud"
                )));
            }
        }
        Ok(FineSupport { units, adjacency, bbox, geometry })
    }

    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    pub fn total_area(&self) -> f64 {
        self.units.iter().map(|u| u.area).sum()
    }

    pub fn areas(&self) -> Vec<f64> {
        self.units.iter().map(|u| u.area).collect()
    }

    /// Index of the unit containing `p`, for grid-backed supports. Points on a
    /// shared cell edge resolve to the lower-index cell.
    pub fn locate_point(&self, p: &[f64]) -> Option<usize> {
        match &self.geometry {
            SupportGeometry::Grid { nx, ny, bbox } => {
                if !bbox.contains(p) {
                    return None;
                }
                let hx = (bbox.max[0] - bbox.min[0]) / *nx as f64;
                let hy = (bbox.max[1] - bbox.min[1]) / *ny as f64;
                // nudge keeps boundary points in the cell they close
                let ix = (((p[0] - bbox.min[0] - 1e-12) / hx).floor() as isize).clamp(0, *nx as isize - 1);
                let iy = (((p[1] - bbox.min[1] - 1e-12) / hy).floor() as isize).clamp(0, *ny as isize - 1);
                Some(iy as usize * nx + ix as usize)
            }
            SupportGeometry::Irregular => None,
        }
    }

    /// Rectangle of cell `id` for grid-backed supports.
    pub fn cell_rect(&self, id: usize) -> Option<Rect> {
        match &self.geometry {
            SupportGeometry::Grid { nx, ny: _, bbox } => {
                let hx = (bbox.max[0] - bbox.min[0]) / *nx as f64;
                let hy = (bbox.max[1] - bbox.min[1]) / (self.units.len() / nx) as f64;
                let ix = id % nx;
                let iy = id / nx;
                Some(Rect {
                    min: vec![bbox.min[0] + ix as f64 * hx, bbox.min[1] + iy as f64 * hy],
                    max: vec![bbox.min[0] + (ix + 1) as f64 * hx, bbox.min[1] + (iy + 1) as f64 * hy],
                })
            }
            SupportGeometry::Irregular => None,
        }
    }
}

/// A union of fine units.
#[derive(Debug, Clone)]
pub struct Region {
    pub members: Vec<usize>,
    pub area: f64,
    pub centroid: Vec<f64>,
    pub samples: Vec<PointSite>,
}

/// A labeling of the fine units into `k` regions. Labels are canonical:
/// 0..k-1, each occurring at least once, numbered by first occurrence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    assignment: Vec<usize>,
    k: usize,
}

impl Partition {
    /// Validates that every label in 0..k-1 occurs at least once.
    pub fn new(assignment: Vec<usize>) -> Result<Self> {
        if assignment.is_empty() {
            return Err(CageError::InvalidInput("empty partition".into()));
        }
        let k = assignment.iter().copied().max().unwrap() + 1;
        let mut seen = vec![false; k];
        for &l in &assignment {
            seen[l] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(CageError::InvalidInput(
                "partition labels must cover 0..k-1 with no gaps".into(),
            ));
        }
        Ok(Partition { assignment, k })
    }

    /// Relabels arbitrary labels canonically by first occurrence.
    pub fn from_labels(raw: &[usize]) -> Self {
        let mut map = std::collections::HashMap::new();
        let mut next = 0usize;
        let assignment = raw
            .iter()
            .map(|&l| {
                *map.entry(l).or_insert_with(|| {
                    let v = next;
                    next += 1;
                    v
                })
            })
            .collect();
        Partition { assignment, k: next }
    }

    pub fn identity(n: usize) -> Self {
        Partition { assignment: (0..n).collect(), k: n }
    }

    pub fn single(n: usize) -> Self {
        Partition { assignment: vec![0; n], k: 1 }
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    /// Member indices per region label, in ascending unit order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k];
        for (i, &l) in self.assignment.iter().enumerate() {
            out[l].push(i);
        }
        out
    }
}

/// Tiles `bbox` with an `nx` by `ny` grid of cells under rook adjacency, each
/// carrying `samples_per_cell` uniform interior points drawn from `seed`.
///
/// When `samples_per_cell` is a perfect square the cloud is stratified (one
/// uniform draw per equal subcell); otherwise plain uniform draws are used.
pub fn build_grid(
    nx: usize,
    ny: usize,
    bbox: &Rect,
    samples_per_cell: usize,
    seed: u64,
) -> Result<FineSupport> {
    if nx == 0 || ny == 0 {
        return Err(CageError::Configuration("grid dimensions must be >= 1".into()));
    }
    if samples_per_cell == 0 {
        return Err(CageError::Configuration("samples_per_cell must be >= 1".into()));
    }
    if bbox.dim() != 2 {
        return Err(CageError::InvalidGeometry("grid supports are two-dimensional".into()));
    }
    let hx = (bbox.max[0] - bbox.min[0]) / nx as f64;
    let hy = (bbox.max[1] - bbox.min[1]) / ny as f64;
    let cell_area = hx * hy;

    let strata = {
        let m = (samples_per_cell as f64).sqrt().round() as usize;
        if m * m == samples_per_cell { Some(m) } else { None }
    };

    let mut units = Vec::with_capacity(nx * ny);
    for iy in 0..ny {
        for ix in 0..nx {
            let id = iy * nx + ix;
            let x0 = bbox.min[0] + ix as f64 * hx;
            let y0 = bbox.min[1] + iy as f64 * hy;
            let mut rng = rng::stream(seed, &[0xce11, id as u64]);
            let mut samples = Vec::with_capacity(samples_per_cell);
            match strata {
                Some(m) => {
                    let sx = hx / m as f64;
                    let sy = hy / m as f64;
                    for sy_i in 0..m {
                        for sx_i in 0..m {
                            let x = x0 + sx_i as f64 * sx + sx * rng.random::<f64>();
                            let y = y0 + sy_i as f64 * sy + sy * rng.random::<f64>();
                            samples.push(PointSite { coords: vec![x, y] });
                        }
                    }
                }
                None => {
                    for _ in 0..samples_per_cell {
                        let x = x0 + hx * rng.random::<f64>();
                        let y = y0 + hy * rng.random::<f64>();
                        samples.push(PointSite { coords: vec![x, y] });
                    }
                }
            }
            units.push(ArealUnit {
                id,
                centroid: vec![x0 + 0.5 * hx, y0 + 0.5 * hy],
                area: cell_area,
                samples,
            });
        }
    }

    let mut pairs = Vec::new();
    for iy in 0..ny {
        for ix in 0..nx {
            let id = iy * nx + ix;
            if ix + 1 < nx {
                pairs.push((id, id + 1));
            }
            if iy + 1 < ny {
                pairs.push((id, id + nx));
            }
        }
    }
    let adjacency = Adjacency::from_pairs(nx * ny, &pairs)?;
    FineSupport::from_parts(
        units,
        adjacency,
        bbox.clone(),
        SupportGeometry::Grid { nx, ny, bbox: bbox.clone() },
    )
}

/// What to sample uniform points from.
pub enum RegionSpec<'a> {
    Rect(&'a Rect),
    /// A union of grid cells of a grid-backed support.
    Cells { support: &'a FineSupport, members: &'a [usize] },
}

/// Draws `n_w` i.i.d.-uniform points inside the region, deterministically from
/// `seed`. The conventional cloud size for external areal units is 20,000.
pub fn sample_region(spec: &RegionSpec<'_>, n_w: usize, seed: u64) -> Result<Vec<PointSite>> {
    if n_w == 0 {
        return Err(CageError::Configuration("n_w must be >= 1".into()));
    }
    let mut rng = rng::stream(seed, &[0x5a3f]);
    match spec {
        RegionSpec::Rect(rect) => {
            if rect.volume() <= 0.0 {
                return Err(CageError::InvalidGeometry("zero-area region".into()));
            }
            Ok((0..n_w).map(|_| PointSite { coords: rect.sample(&mut rng) }).collect())
        }
        RegionSpec::Cells { support, members } => {
            if members.is_empty() {
                return Err(CageError::InvalidGeometry("empty cell set".into()));
            }
            let rects: Vec<Rect> = members
                .iter()
                .map(|&id| {
                    support.cell_rect(id).ok_or_else(|| {
                        CageError::InvalidGeometry(
                            "uniform resampling needs a grid-backed support".into(),
                        )
                    })
                })
                .collect::<Result<_>>()?;
            let areas: Vec<f64> = rects.iter().map(|r| r.volume()).collect();
            let total: f64 = areas.iter().sum();
            if total <= 0.0 {
                return Err(CageError::InvalidGeometry("zero-area region".into()));
            }
            let mut cum = Vec::with_capacity(areas.len());
            let mut acc = 0.0;
            for a in &areas {
                acc += a / total;
                cum.push(acc);
            }
            Ok((0..n_w)
                .map(|_| {
                    let u = rng.random::<f64>();
                    let idx = cum.partition_point(|c| *c < u).min(rects.len() - 1);
                    PointSite { coords: rects[idx].sample(&mut rng) }
                })
                .collect())
        }
    }
}

/// Merges fine units into `partition.k()` regions. Areas and sample clouds are
/// unions of the members'; centroids are area-weighted means.
pub fn merge_regions(support: &FineSupport, partition: &Partition) -> Result<Vec<Region>> {
    if partition.len() != support.n_units() {
        return Err(CageError::InvalidInput(format!(
            "partition over {} units but support has {}",
            partition.len(),
            support.n_units()
        )));
    }
    let dim = support.bbox.dim();
    Ok(partition
        .members()
        .into_iter()
        .map(|members| {
            let mut area = 0.0;
            let mut centroid = vec![0.0; dim];
            let mut samples = Vec::new();
            for &h in &members {
                let u = &support.units[h];
                area += u.area;
                for (c, x) in centroid.iter_mut().zip(&u.centroid) {
                    *c += u.area * x;
                }
                samples.extend(u.samples.iter().cloned());
            }
            for c in &mut centroid {
                *c /= area;
            }
            Region { members, area, centroid, samples }
        })
        .collect())
}

/// True for a region iff its members form one connected component under the
/// support adjacency. Uses union-find; the test suite checks it against an
/// independent breadth-first search.
pub fn contiguity_check(support: &FineSupport, partition: &Partition) -> Vec<bool> {
    let n = support.n_units();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let labels = partition.assignment();
    for (i, j) in support.adjacency.pairs() {
        if labels[i] == labels[j] {
            let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
            if ri != rj {
                parent[ri] = rj;
            }
        }
    }
    let mut roots = vec![std::collections::HashSet::new(); partition.k()];
    for i in 0..n {
        let r = find(&mut parent, i);
        roots[labels[i]].insert(r);
    }
    roots.into_iter().map(|set| set.len() == 1).collect()
}
