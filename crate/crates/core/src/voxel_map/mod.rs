//! Global map of hashed cuboid cells and the adaptive local map built from it.

mod baseline;
mod downsample;
mod hash;
mod kdtree;
mod table;

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use baseline::MonolithicKdMap;
pub use downsample::{voxel_downsample, voxel_key, VoxelKey};
pub use hash::{baseline_hash, cell_center, cell_hash, cell_index, mix64, CellIndex, HashKind};
pub use kdtree::{KdTree, Neighbor};
pub use table::CellTable;

use crate::error::{Error, Result};
use crate::geometry::{Point3, PoseSE3};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapConfig {
    /// Horizontal cell size (m).
    pub s_xy: f64,
    /// Vertical cell size (m).
    pub s_z: f64,
    /// A cell holding more points than this is voxel-filtered.
    pub tau: usize,
    pub voxel_leaf: f64,
    /// Chebyshev radius of the local-map neighbourhood, in cells.
    pub local_radius_cells: i64,
    /// Number of recent world-frame edge sets appended to the local map.
    pub recent_sweeps: usize,
    pub hash: HashKind,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            s_xy: 25.0,
            s_z: 20.0,
            tau: 64,
            voxel_leaf: 0.4,
            local_radius_cells: 1,
            recent_sweeps: 3,
            hash: HashKind::XorShift,
        }
    }
}

impl MapConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.s_xy > 0.0 && self.s_z > 0.0) {
            return Err(Error::Config("cell sizes must be positive".into()));
        }
        if self.tau < 1 {
            return Err(Error::Config("tau must be >= 1".into()));
        }
        if !(self.voxel_leaf > 0.0) {
            return Err(Error::Config("voxel_leaf must be positive".into()));
        }
        if self.local_radius_cells < 0 {
            return Err(Error::Config("local_radius_cells must be >= 0".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn cell_of(&self, p: &Point3) -> CellIndex {
        cell_index(p, self.s_xy, self.s_z)
    }

    pub fn center_of(&self, index: &CellIndex) -> Point3 {
        cell_center(index, self.s_xy, self.s_z)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub index: CellIndex,
    pub center: Point3,
    /// World-frame points.
    pub points: Vec<Point3>,
    /// Voxel → slot of `points`, kept while no two points share a voxel.
    voxels: Option<HashMap<VoxelKey, usize>>,
}

impl Cell {
    pub fn new(index: CellIndex, center: Point3) -> Self {
        Self {
            index,
            center,
            points: Vec::new(),
            voxels: Some(HashMap::new()),
        }
    }

    /// Appends `p`; when the cell then holds more than `tau` points it is
    /// replaced by its voxel-grid centroids. Returns true if filtered.
    ///
    /// While every voxel holds at most one point, filtering after one insert
    /// only merges `p` with the point already in its voxel, so the result
    /// equals a full [`voxel_downsample`] pass without rescanning the cell.
    fn insert(&mut self, p: Point3, tau: usize, leaf: f64) -> bool {
        let key = voxel_key(&p, leaf);
        let occupied = self.voxels.as_ref().and_then(|v| v.get(&key).copied());
        let overflow = self.points.len() + 1 > tau;
        match (&mut self.voxels, occupied, overflow) {
            (Some(v), None, _) => {
                v.insert(key, self.points.len());
                self.points.push(p);
                overflow
            }
            (Some(_), Some(slot), true) => {
                self.points[slot] = (self.points[slot] + p) / 2.0;
                true
            }
            (_, _, false) => {
                self.voxels = None;
                self.points.push(p);
                false
            }
            (None, _, true) => {
                self.points.push(p);
                self.points = voxel_downsample(&self.points, leaf);
                self.reindex(leaf);
                true
            }
        }
    }

    fn reindex(&mut self, leaf: f64) {
        let mut v = HashMap::with_capacity(self.points.len());
        for (i, p) in self.points.iter().enumerate() {
            if v.insert(voxel_key(p, leaf), i).is_some() {
                self.voxels = None;
                return;
            }
        }
        self.voxels = Some(v);
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub points_added: usize,
    pub cells_created: usize,
    pub cells_filtered: usize,
}

/// Hash table of cells partitioning space; single writer.
#[derive(Debug, Clone)]
pub struct GlobalMap {
    table: CellTable<Cell>,
    config: MapConfig,
    points: usize,
}

impl GlobalMap {
    pub fn new(config: MapConfig) -> Self {
        Self {
            table: CellTable::new(config.hash),
            config,
            points: 0,
        }
    }

    pub fn config(&self) -> &MapConfig {
        &self.config
    }

    pub fn cell_count(&self) -> usize {
        self.table.len()
    }

    pub fn point_count(&self) -> usize {
        self.points
    }

    pub fn table(&self) -> &CellTable<Cell> {
        &self.table
    }

    pub fn cell(&self, index: &CellIndex) -> Option<&Cell> {
        self.table.get(index)
    }

    /// Cells in creation order.
    pub fn cells(&self) -> impl Iterator<Item = &Cell> {
        self.table.iter().map(|(_, c)| c)
    }

    /// Inserts world-frame points one at a time: locate (or create) the
    /// owning cell, append, and voxel-filter an existing cell whenever it
    /// holds more than `tau` points.
    pub fn update(&mut self, points_world: &[Point3]) -> UpdateStats {
        let cfg = self.config;
        let mut stats = UpdateStats::default();
        for p in points_world {
            let index = cfg.cell_of(p);
            let (cell, created) = self
                .table
                .get_or_insert_with(index, || Cell::new(index, cfg.center_of(&index)));
            let before = cell.points.len();
            let filtered = cell.insert(*p, cfg.tau, cfg.voxel_leaf);
            self.points = self.points + cell.points.len() - before;
            stats.points_added += 1;
            if created {
                stats.cells_created += 1;
            }
            if filtered {
                stats.cells_filtered += 1;
            }
        }
        stats
    }

    /// Points of every existing cell within the Chebyshev neighbourhood of
    /// `center`, enumerated in `(dz, dy, dx)` order.
    pub fn neighborhood_points(&self, center: &CellIndex, radius: i64) -> Vec<Point3> {
        let mut out = Vec::new();
        for dz in -radius..=radius {
            for dy in -radius..=radius {
                for dx in -radius..=radius {
                    if let Some(c) = self.table.get(&center.offset(dx, dy, dz)) {
                        out.extend_from_slice(&c.points);
                    }
                }
            }
        }
        out
    }

    /// Writes `ix iy iz x y z` lines, one per stored point.
    pub fn write_dump(&self, path: &Path) -> Result<()> {
        let io = |e| Error::io(path, e);
        let mut w = BufWriter::new(File::create(path).map_err(io)?);
        for cell in self.cells() {
            let i = &cell.index;
            for p in &cell.points {
                writeln!(
                    w,
                    "{} {} {} {:e} {:e} {:e}",
                    i.ix, i.iy, i.iz, p.x, p.y, p.z
                )
                .map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    /// Rebuilds a map from a dump. Cell membership is taken from the dump;
    /// no filtering is applied.
    pub fn read_dump(path: &Path, config: MapConfig) -> Result<GlobalMap> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut map = GlobalMap::new(config);
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = || {
                Error::Parse(format!(
                    "{}:{}: expected `ix iy iz x y z`",
                    path.display(),
                    n + 1
                ))
            };
            if f.len() != 6 {
                return Err(bad());
            }
            let int = |s: &str| s.parse::<i64>().map_err(|_| bad());
            let flt = |s: &str| s.parse::<f64>().map_err(|_| bad());
            let index = CellIndex::new(int(f[0])?, int(f[1])?, int(f[2])?);
            let p = Point3::new(flt(f[3])?, flt(f[4])?, flt(f[5])?);
            let (cell, _) = map
                .table
                .get_or_insert_with(index, || Cell::new(index, config.center_of(&index)));
            cell.points.push(p);
            cell.voxels = None;
            map.points += 1;
        }
        Ok(map)
    }
}

/// Summary written next to a map dump.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapStats {
    pub cells: usize,
    pub points: usize,
    pub entropy: EntropyReport,
}

impl MapStats {
    pub fn of(map: &GlobalMap) -> Result<Self> {
        Ok(Self {
            cells: map.cell_count(),
            points: map.point_count(),
            entropy: table_entropy(map)?,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Free function form of [`GlobalMap::update`].
pub fn map_update(map: &mut GlobalMap, edges_world: &[Point3]) -> UpdateStats {
    map.update(edges_world)
}

/// Immutable snapshot used for correspondence search.
#[derive(Debug, Clone, Default)]
pub struct LocalMap {
    pub epoch: usize,
    tree: KdTree,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnResult {
    /// Nearest points, ascending by distance.
    pub points: Vec<Point3>,
    pub distances: Vec<f64>,
    /// True when fewer than `k` points were available.
    pub short: bool,
}

impl LocalMap {
    /// Builds the snapshot from points in priority order; exact duplicates
    /// keep their first occurrence only.
    pub fn from_points(points: impl IntoIterator<Item = Point3>, epoch: usize) -> Self {
        let mut seen = HashSet::new();
        let unique: Vec<Point3> = points
            .into_iter()
            .filter(|p| seen.insert([p.x.to_bits(), p.y.to_bits(), p.z.to_bits()]))
            .collect();
        Self {
            epoch,
            tree: KdTree::build(unique),
        }
    }

    pub fn points(&self) -> &[Point3] {
        self.tree.points()
    }

    pub fn len(&self) -> usize {
        self.tree.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tree.is_empty()
    }

    pub fn knn(&self, query: &Point3, k: usize) -> KnnResult {
        let found = self.tree.knn(query, k);
        let pts = self.tree.points();
        KnnResult {
            short: found.len() < k,
            points: found.iter().map(|n| pts[n.index]).collect(),
            distances: found.iter().map(|n| n.dist_sq.sqrt()).collect(),
        }
    }
}

/// Union of the cells around the sensor position and the most recent
/// world-frame edge sets (newest first).
pub fn local_map(
    map: &GlobalMap,
    lidar_pose: &PoseSE3,
    recent: &[&[Point3]],
    epoch: usize,
) -> LocalMap {
    let cfg = map.config();
    let center = cfg.cell_of(&lidar_pose.translation);
    let cells = map.neighborhood_points(&center, cfg.local_radius_cells);
    let recent_pts = recent
        .iter()
        .take(cfg.recent_sweeps)
        .flat_map(|s| s.iter().copied());
    LocalMap::from_points(cells.into_iter().chain(recent_pts), epoch)
}

pub fn knn(local: &LocalMap, query: &Point3, k: usize) -> KnnResult {
    local.knn(query, k)
}

/// Spread of cells over the physical buckets of the hash table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub buckets: usize,
    pub items: usize,
    pub occupied_buckets: usize,
    pub max_chain: usize,
    /// `-Σ p(k) ln p(k)`, in nats.
    pub entropy: f64,
    /// `ln(buckets)`, the upper bound.
    pub max_entropy: f64,
    /// `p(k)` for every bucket.
    #[serde(skip)]
    pub probabilities: Vec<f64>,
}

/// Entropy of the bucket occupancy distribution, `p(k) = cells in bucket k /
/// total cells`, with `0 · ln 0 = 0`.
pub fn table_entropy(map: &GlobalMap) -> Result<EntropyReport> {
    entropy_of_lengths(map.table().bucket_lengths())
}

pub fn entropy_of_lengths(lengths: impl Iterator<Item = usize>) -> Result<EntropyReport> {
    let lengths: Vec<usize> = lengths.collect();
    let items: usize = lengths.iter().sum();
    if items == 0 {
        return Err(Error::EmptyMap);
    }
    let total = items as f64;
    let probabilities: Vec<f64> = lengths.iter().map(|&n| n as f64 / total).collect();
    let entropy = -probabilities
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>();
    Ok(EntropyReport {
        buckets: lengths.len(),
        items,
        occupied_buckets: lengths.iter().filter(|&&n| n > 0).count(),
        max_chain: lengths.iter().copied().max().unwrap_or(0),
        entropy: entropy.max(0.0),
        max_entropy: (lengths.len() as f64).ln(),
        probabilities,
    })
}
