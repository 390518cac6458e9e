use crate::geometry::{transform_point, AnchorGrid, Pose2D};
use crate::scalar::Real;
use crate::scenes::Agent;

/// Point count, mean x offset, mean y offset (in cell units, relative to the
/// cell center), and saturating density `n / (n + 1)`.
pub const CHANNELS: usize = 4;

/// H x W x C tensor, channel-last.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        FeatureMap {
            height,
            width,
            channels,
            values: vec![T::zero(); height * width * channels],
        }
    }

    #[inline]
    pub fn cell(&self, cell: usize) -> &[T] {
        &self.values[cell * self.channels..(cell + 1) * self.channels]
    }

    #[inline]
    pub fn cell_mut(&mut self, cell: usize) -> &mut [T] {
        &mut self.values[cell * self.channels..(cell + 1) * self.channels]
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize, ch: usize) -> T {
        self.values[(row * self.width + col) * self.channels + ch]
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }
}

/// Rasterizes an agent's points (its own frame) onto the grid.
pub fn encode<T: Real>(agent: &Agent<T>, grid: &AnchorGrid<T>) -> FeatureMap<T> {
    let mut f = FeatureMap::zeros(grid.height_cells, grid.width_cells, CHANNELS);
    for &[x, y] in &agent.points {
        let Some(cell) = grid.cell_at(x, y) else {
            continue;
        };
        let (cx, cy) = grid.cell_center(cell);
        let v = f.cell_mut(cell);
        v[0] += T::one();
        v[1] += (x - cx) / grid.cell_size;
        v[2] += (y - cy) / grid.cell_size;
    }
    for cell in 0..grid.num_cells() {
        let v = f.cell_mut(cell);
        let n = v[0];
        if n > T::zero() {
            v[1] /= n;
            v[2] /= n;
            v[3] = n / (n + T::one());
        }
    }
    f
}

/// Resamples `f` (rasterized in `from`'s frame) into `to`'s frame by
/// nearest-cell lookup; target cells that map outside the source grid are zero.
pub fn project_feature<T: Real>(
    f: &FeatureMap<T>,
    grid: &AnchorGrid<T>,
    from: &Pose2D<T>,
    to: &Pose2D<T>,
) -> FeatureMap<T> {
    let mut out = FeatureMap::zeros(f.height, f.width, f.channels);
    for cell in 0..grid.num_cells() {
        let (x, y) = grid.cell_center(cell);
        let [sx, sy] = transform_point([x, y], to, from);
        if let Some(src) = grid.cell_at(sx, sy) {
            out.cell_mut(cell).copy_from_slice(f.cell(src));
        }
    }
    out
}

/// Elementwise maximum over the ego map and all projected maps.
pub fn fuse_max<T: Real>(ego: &FeatureMap<T>, projected: &[FeatureMap<T>]) -> FeatureMap<T> {
    let mut out = ego.clone();
    for p in projected {
        assert!(out.same_shape(p), "fusing feature maps of different shapes");
        for (o, &v) in out.values.iter_mut().zip(&p.values) {
            if v > *o {
                *o = v;
            }
        }
    }
    out
}
