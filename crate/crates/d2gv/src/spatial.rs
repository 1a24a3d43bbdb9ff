//! Uniform-grid spatial hash for k-nearest-neighbor queries over primitive
//! centers. Cells are searched in expanding square rings until the k-th best
//! distance is closer than the nearest unexplored ring, so results are exact.

/// A point set bucketed into square cells of side `cell_size`.
pub struct SpatialGrid {
    points: Vec<[f64; 2]>,
    cell_size: f64,
    origin: [f64; 2],
    nx: i64,
    ny: i64,
    /// per-cell point indices, each list in ascending index order
    cells: Vec<Vec<u32>>,
}

impl SpatialGrid {
    pub fn build(points: &[[f64; 2]]) -> Self {
        assert!(!points.is_empty(), "spatial grid needs at least one point");
        let mut min = [f64::INFINITY; 2];
        let mut max = [f64::NEG_INFINITY; 2];
        for p in points {
            for k in 0..2 {
                min[k] = min[k].min(p[k]);
                max[k] = max[k].max(p[k]);
            }
        }
        let extent = ((max[0] - min[0]).max(max[1] - min[1])).max(1e-9);
        // aim for O(1) points per cell on uniformly spread inputs
        let target_cells = (points.len() as f64).sqrt().ceil().max(1.0);
        let cell_size = extent / target_cells;
        let nx = (((max[0] - min[0]) / cell_size).floor() as i64 + 1).max(1);
        let ny = (((max[1] - min[1]) / cell_size).floor() as i64 + 1).max(1);
        let mut cells = vec![Vec::new(); (nx * ny) as usize];
        for (i, p) in points.iter().enumerate() {
            let cx = (((p[0] - min[0]) / cell_size).floor() as i64).clamp(0, nx - 1);
            let cy = (((p[1] - min[1]) / cell_size).floor() as i64).clamp(0, ny - 1);
            cells[(cy * nx + cx) as usize].push(i as u32);
        }
        Self {
            points: points.to_vec(),
            cell_size,
            origin: min,
            nx,
            ny,
            cells,
        }
    }

    fn cell_of(&self, p: [f64; 2]) -> (i64, i64) {
        let cx = (((p[0] - self.origin[0]) / self.cell_size).floor() as i64).clamp(0, self.nx - 1);
        let cy = (((p[1] - self.origin[1]) / self.cell_size).floor() as i64).clamp(0, self.ny - 1);
        (cx, cy)
    }

    /// The `k` nearest points to point `query` (itself excluded), ordered by
    /// ascending distance with index tie-break. Returns fewer than `k` only
    /// when the set is too small.
    pub fn knn_excluding(&self, query: usize, k: usize) -> Vec<usize> {
        if k == 0 {
            return Vec::new();
        }
        let q = self.points[query];
        let (qcx, qcy) = self.cell_of(q);
        // (dist2, idx) of current best candidates, sorted ascending
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        let max_ring = self.nx.max(self.ny);
        for ring in 0..=max_ring {
            // Any point in an unexplored ring is at least this far away.
            if best.len() == k {
                let ring_min = (ring - 1).max(0) as f64 * self.cell_size;
                if best[k - 1].0 <= ring_min * ring_min {
                    break;
                }
            }
            let visit = |cx: i64, cy: i64, best: &mut Vec<(f64, usize)>| {
                if cx < 0 || cy < 0 || cx >= self.nx || cy >= self.ny {
                    return;
                }
                for &pi in &self.cells[(cy * self.nx + cx) as usize] {
                    let pi = pi as usize;
                    if pi == query {
                        continue;
                    }
                    let p = self.points[pi];
                    let dx = p[0] - q[0];
                    let dy = p[1] - q[1];
                    let d2 = dx * dx + dy * dy;
                    let entry = (d2, pi);
                    let pos = best
                        .binary_search_by(|e| {
                            e.partial_cmp(&entry).expect("finite distances")
                        })
                        .unwrap_or_else(|p| p);
                    if pos < k {
                        best.insert(pos, entry);
                        best.truncate(k);
                    }
                }
            };
            if ring == 0 {
                visit(qcx, qcy, &mut best);
            } else {
                for cx in (qcx - ring)..=(qcx + ring) {
                    visit(cx, qcy - ring, &mut best);
                    visit(cx, qcy + ring, &mut best);
                }
                for cy in (qcy - ring + 1)..(qcy + ring) {
                    visit(qcx - ring, cy, &mut best);
                    visit(qcx + ring, cy, &mut best);
                }
            }
        }
        best.into_iter().map(|(_, i)| i).collect()
    }
}
