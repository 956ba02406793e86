/// A ground-truth pixel: `(row, col)` in the coordinate frame of whatever
/// raster it is applied to, and a class index into the palette.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LabelPoint {
    pub row: usize,
    pub col: usize,
    pub class: usize,
}

impl LabelPoint {
    pub fn new(row: usize, col: usize, class: usize) -> Self {
        LabelPoint { row, col, class }
    }

    pub fn pos(&self) -> (usize, usize) {
        (self.row, self.col)
    }
}

/// Axis-aligned rectangle of pixels in scene coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Extent {
    pub row0: usize,
    pub col0: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Extent {
    pub fn new(row0: usize, col0: usize, rows: usize, cols: usize) -> Self {
        Extent { row0, col0, rows, cols }
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.row0 && row < self.row0 + self.rows && col >= self.col0 && col < self.col0 + self.cols
    }

    pub fn area(&self) -> usize {
        self.rows * self.cols
    }

    /// Every pixel, row-major.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.row0..self.row0 + self.rows).flat_map(move |r| (self.col0..self.col0 + self.cols).map(move |c| (r, c)))
    }
}

impl std::fmt::Display for Extent {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "rows {}..{} x cols {}..{}",
            self.row0,
            self.row0 + self.rows,
            self.col0,
            self.col0 + self.cols
        )
    }
}
