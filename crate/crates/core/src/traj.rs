//! Token visiting orders over an `H × W` grid.
//!
//! A [`Trajectory`] is a bijection from scan step to flat row-major grid
//! index. Window trajectories visit windows in row-major order and the
//! tokens of each window in the requested direction; border windows are
//! truncated, never padded.

use thiserror::Error;

use crate::tensor::{Element, Tensor};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TrajError {
    #[error("window size must be at least 1")]
    ZeroWindow,
    #[error("not a permutation of 0..{len}: {detail}")]
    NotBijection { len: usize, detail: String },
    #[error("cross-scale layout needs even extents, got {h}x{w}")]
    OddExtent { h: usize, w: usize },
    #[error("sequence has {found} tokens, trajectory expects {expected}")]
    Length { expected: usize, found: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    /// Row-major.
    Horizontal,
    /// Column-major.
    Vertical,
}

#[derive(Clone, PartialEq, Eq)]
pub struct Trajectory {
    height: usize,
    width: usize,
    perm: Vec<usize>,
    inv: Vec<usize>,
}

impl std::fmt::Debug for Trajectory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Trajectory({}x{}, {:?})", self.height, self.width, self.perm)
    }
}

impl Trajectory {
    /// Validates `perm` and builds its inverse.
    pub fn from_perm(height: usize, width: usize, perm: Vec<usize>) -> Result<Self, TrajError> {
        let len = height * width;
        if perm.len() != len {
            return Err(TrajError::NotBijection {
                len,
                detail: format!("length {}", perm.len()),
            });
        }
        let mut inv = vec![usize::MAX; len];
        for (k, &p) in perm.iter().enumerate() {
            if p >= len || inv[p] != usize::MAX {
                return Err(TrajError::NotBijection {
                    len,
                    detail: format!("entry {p} at step {k}"),
                });
            }
            inv[p] = k;
        }
        Ok(Trajectory {
            height,
            width,
            perm,
            inv,
        })
    }

    pub fn raster(height: usize, width: usize, direction: Direction) -> Self {
        let perm = match direction {
            Direction::Horizontal => (0..height * width).collect(),
            Direction::Vertical => (0..width)
                .flat_map(|c| (0..height).map(move |r| r * width + c))
                .collect(),
        };
        Self::from_perm(height, width, perm).expect("raster order is a bijection")
    }

    pub fn window_raster(height: usize, width: usize, win: usize, direction: Direction) -> Result<Self, TrajError> {
        if win == 0 {
            return Err(TrajError::ZeroWindow);
        }
        let mut perm = Vec::with_capacity(height * width);
        for wr in (0..height).step_by(win) {
            for wc in (0..width).step_by(win) {
                let (r_end, c_end) = ((wr + win).min(height), (wc + win).min(width));
                match direction {
                    Direction::Horizontal => {
                        for r in wr..r_end {
                            perm.extend((wc..c_end).map(|c| r * width + c));
                        }
                    }
                    Direction::Vertical => {
                        for c in wc..c_end {
                            perm.extend((wr..r_end).map(|r| r * width + c));
                        }
                    }
                }
            }
        }
        Self::from_perm(height, width, perm)
    }

    /// Full-sequence reversal.
    pub fn flip(&self) -> Self {
        let perm: Vec<usize> = self.perm.iter().rev().copied().collect();
        let n = perm.len();
        let inv = self.inv.iter().map(|&k| n - 1 - k).collect();
        Trajectory {
            height: self.height,
            width: self.width,
            perm,
            inv,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.perm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perm.is_empty()
    }

    /// `perm[k]` is the flat index visited at step `k`.
    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    /// `inv_perm[i]` is the step at which flat index `i` is visited.
    pub fn inv_perm(&self) -> &[usize] {
        &self.inv
    }

    /// `(row, col)` visited at step `k`.
    pub fn coords(&self, k: usize) -> (usize, usize) {
        let p = self.perm[k];
        (p / self.width, p % self.width)
    }

    /// `out[k] = x[perm[k]]` over the rows of an `L × D` tensor.
    pub fn gather<T: Element>(&self, x: &Tensor<T>) -> Result<Tensor<T>, TrajError> {
        permute_rows(x, &self.perm)
    }

    /// Inverse of [`Trajectory::gather`].
    pub fn scatter<T: Element>(&self, x: &Tensor<T>) -> Result<Tensor<T>, TrajError> {
        permute_rows(x, &self.inv)
    }
}

fn permute_rows<T: Element>(x: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>, TrajError> {
    let rows = x.shape().first().copied().unwrap_or(0);
    if rows != idx.len() {
        return Err(TrajError::Length {
            expected: idx.len(),
            found: rows,
        });
    }
    let d = x.numel().checked_div(rows).unwrap_or(0);
    let mut out = Vec::with_capacity(x.numel());
    for &i in idx {
        out.extend_from_slice(&x.data()[i * d..(i + 1) * d]);
    }
    Ok(Tensor::new(x.shape().to_vec(), out).expect("same shape"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    Window(usize),
    Sequential,
}

/// Scan plan for one block: one trajectory and its flip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanSchedule {
    pub block_index: usize,
    pub granularity: Granularity,
    pub direction: Direction,
}

/// Granularity alternates every two blocks, direction every block.
pub fn schedule_for_block(k: usize, win: usize) -> ScanSchedule {
    ScanSchedule {
        block_index: k,
        granularity: if (k / 2).is_multiple_of(2) {
            Granularity::Window(win)
        } else {
            Granularity::Sequential
        },
        direction: if k.is_multiple_of(2) {
            Direction::Horizontal
        } else {
            Direction::Vertical
        },
    }
}

impl ScanSchedule {
    /// Base trajectory on an `h × w` grid. Sequential scans use a window of
    /// `seq_window`, which covers the whole grid when it is at least as large.
    pub fn trajectory(&self, h: usize, w: usize, seq_window: usize) -> Result<Trajectory, TrajError> {
        let win = match self.granularity {
            Granularity::Window(win) => win,
            Granularity::Sequential => seq_window,
        };
        Trajectory::window_raster(h, w, win, self.direction)
    }

    /// `[t, flip(t)]`.
    pub fn pair(&self, h: usize, w: usize, seq_window: usize) -> Result<[Trajectory; 2], TrajError> {
        let t = self.trajectory(h, w, seq_window)?;
        let f = t.flip();
        Ok([t, f])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Plane {
    Down,
    Orig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LayoutToken {
    pub plane: Plane,
    pub row: usize,
    pub col: usize,
}

/// Interleaving of a half-scale grid with its full-scale grid: each
/// down-sampled token is followed by its four aligned children.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrossScaleLayout {
    pub down_h: usize,
    pub down_w: usize,
    pub sequence: Vec<LayoutToken>,
}

/// Layout for an `h × w` full-scale grid (both extents even).
pub fn cross_scale_interleave(h: usize, w: usize) -> Result<CrossScaleLayout, TrajError> {
    if !h.is_multiple_of(2) || !w.is_multiple_of(2) {
        return Err(TrajError::OddExtent { h, w });
    }
    let (dh, dw) = (h / 2, w / 2);
    let mut sequence = Vec::with_capacity(5 * dh * dw);
    for i in 0..dh {
        for j in 0..dw {
            sequence.push(LayoutToken {
                plane: Plane::Down,
                row: i,
                col: j,
            });
            for (dr, dc) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                sequence.push(LayoutToken {
                    plane: Plane::Orig,
                    row: 2 * i + dr,
                    col: 2 * j + dc,
                });
            }
        }
    }
    Ok(CrossScaleLayout {
        down_h: dh,
        down_w: dw,
        sequence,
    })
}

impl CrossScaleLayout {
    pub fn orig_h(&self) -> usize {
        2 * self.down_h
    }

    pub fn orig_w(&self) -> usize {
        2 * self.down_w
    }

    pub fn len(&self) -> usize {
        self.sequence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequence.is_empty()
    }

    /// For each sequence slot, the row of the stacked `[down; orig]` token
    /// matrix it reads (down tokens first, both planes row-major).
    pub fn gather_indices(&self) -> Vec<usize> {
        let n_down = self.down_h * self.down_w;
        self.sequence
            .iter()
            .map(|t| match t.plane {
                Plane::Down => t.row * self.down_w + t.col,
                Plane::Orig => n_down + t.row * self.orig_w() + t.col,
            })
            .collect()
    }

    /// For each full-scale token in row-major order, its slot in the sequence.
    pub fn orig_slots(&self) -> Vec<usize> {
        let ow = self.orig_w();
        let mut slots = vec![0; self.orig_h() * ow];
        for (k, t) in self.sequence.iter().enumerate() {
            if t.plane == Plane::Orig {
                slots[t.row * ow + t.col] = k;
            }
        }
        slots
    }

    /// Builds the interleaved `len × D` sequence from row-major `down` and `orig` tokens.
    pub fn interleave<T: Element>(&self, down: &Tensor<T>, orig: &Tensor<T>) -> Result<Tensor<T>, TrajError> {
        let n_down = self.down_h * self.down_w;
        let n_orig = 4 * n_down;
        let rows = |t: &Tensor<T>| t.shape().first().copied().unwrap_or(0);
        if rows(down) != n_down {
            return Err(TrajError::Length {
                expected: n_down,
                found: rows(down),
            });
        }
        if rows(orig) != n_orig || orig.numel() != 4 * down.numel() {
            return Err(TrajError::Length {
                expected: n_orig,
                found: rows(orig),
            });
        }
        let d = down.numel().checked_div(n_down).unwrap_or(0);
        let mut out = Vec::with_capacity(self.len() * d);
        for idx in self.gather_indices() {
            let src = if idx < n_down {
                &down.data()[idx * d..(idx + 1) * d]
            } else {
                &orig.data()[(idx - n_down) * d..(idx - n_down + 1) * d]
            };
            out.extend_from_slice(src);
        }
        Ok(Tensor::new(vec![self.len(), d], out).expect("shape matches"))
    }

    /// Drops the down-sampled tokens and returns the full-scale ones in row-major order.
    pub fn extract_original<T: Element>(&self, seq: &Tensor<T>) -> Result<Tensor<T>, TrajError> {
        let rows = seq.shape().first().copied().unwrap_or(0);
        if rows != self.len() {
            return Err(TrajError::Length {
                expected: self.len(),
                found: rows,
            });
        }
        let d = seq.numel().checked_div(rows).unwrap_or(0);
        let slots = self.orig_slots();
        let mut out = Vec::with_capacity(slots.len() * d);
        for k in &slots {
            out.extend_from_slice(&seq.data()[k * d..(k + 1) * d]);
        }
        Ok(Tensor::new(vec![slots.len(), d], out).expect("shape matches"))
    }
}

/// Header of [`Trajectory::to_csv`].
pub const TRAJ_CSV_HEADER: &str = "step,row,col,flat_index";

impl Trajectory {
    /// One `step,row,col,flat_index` row per visited token.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{TRAJ_CSV_HEADER}\n");
        for k in 0..self.len() {
            let (r, c) = self.coords(k);
            s.push_str(&format!("{k},{r},{c},{}\n", self.perm[k]));
        }
        s
    }

    /// Visiting step of every cell scaled to `[0, 1]`, row-major.
    pub fn step_map(&self) -> Vec<f64> {
        let denom = self.len().saturating_sub(1).max(1) as f64;
        self.inv.iter().map(|&k| k as f64 / denom).collect()
    }
}

impl CrossScaleLayout {
    /// Like [`Trajectory::to_csv`] with a trailing `plane` column; `flat_index`
    /// is row-major within the token's own plane.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{TRAJ_CSV_HEADER},plane\n");
        for (k, t) in self.sequence.iter().enumerate() {
            let (w, name) = match t.plane {
                Plane::Down => (self.down_w, "down"),
                Plane::Orig => (self.orig_w(), "orig"),
            };
            s.push_str(&format!("{k},{},{},{},{name}\n", t.row, t.col, t.row * w + t.col));
        }
        s
    }

    /// Visiting step of each full-scale token scaled to `[0, 1]`.
    pub fn step_map(&self) -> Vec<f64> {
        let denom = self.len().saturating_sub(1).max(1) as f64;
        self.orig_slots().iter().map(|&k| k as f64 / denom).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_dumps() {
        let t = Trajectory::raster(2, 2, Direction::Horizontal);
        assert_eq!(t.to_csv(), "step,row,col,flat_index\n0,0,0,0\n1,0,1,1\n2,1,0,2\n3,1,1,3\n");
        assert_eq!(t.step_map(), vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);
        let lay = cross_scale_interleave(4, 4).unwrap();
        let csv = lay.to_csv();
        assert_eq!(csv.lines().count(), 21);
        assert_eq!(csv.lines().filter(|l| l.ends_with(",down")).count(), 4);
        assert_eq!(csv.lines().nth(1), Some("0,0,0,0,down"));
        assert_eq!(csv.lines().nth(2), Some("1,0,0,0,orig"));
    }

    #[test]
    fn raster_orders() {
        assert_eq!(Trajectory::raster(2, 2, Direction::Horizontal).perm(), &[0, 1, 2, 3]);
        assert_eq!(Trajectory::raster(2, 2, Direction::Vertical).perm(), &[0, 2, 1, 3]);
        assert_eq!(
            Trajectory::raster(1, 5, Direction::Horizontal),
            Trajectory::raster(1, 5, Direction::Vertical)
        );
    }

    #[test]
    fn window_raster_2x2_windows() {
        let t = Trajectory::window_raster(4, 4, 2, Direction::Horizontal).unwrap();
        assert_eq!(t.perm(), &[0, 1, 4, 5, 2, 3, 6, 7, 8, 9, 12, 13, 10, 11, 14, 15]);
        let v = Trajectory::window_raster(4, 4, 2, Direction::Vertical).unwrap();
        assert_eq!(v.perm(), &[0, 4, 1, 5, 2, 6, 3, 7, 8, 12, 9, 13, 10, 14, 11, 15]);
        assert_eq!(Trajectory::window_raster(3, 3, 0, Direction::Vertical), Err(TrajError::ZeroWindow));
    }

    #[test]
    fn flip_reverses() {
        let t = Trajectory::raster(2, 2, Direction::Horizontal);
        assert_eq!(t.flip().perm(), &[3, 2, 1, 0]);
        assert_eq!(t.flip().flip(), t);
    }

    #[test]
    fn schedule_phases() {
        use Direction::*;
        use Granularity::*;
        let s = |k| {
            let s = schedule_for_block(k, 8);
            (s.granularity, s.direction)
        };
        assert_eq!(s(0), (Window(8), Horizontal));
        assert_eq!(s(1), (Window(8), Vertical));
        assert_eq!(s(2), (Sequential, Horizontal));
        assert_eq!(s(3), (Sequential, Vertical));
        for k in 0..16 {
            assert_eq!(s(k), s(k + 4));
        }
    }

    #[test]
    fn cross_layout_2x2() {
        let l = cross_scale_interleave(2, 2).unwrap();
        let tok = |plane, row, col| LayoutToken { plane, row, col };
        assert_eq!(
            l.sequence,
            vec![
                tok(Plane::Down, 0, 0),
                tok(Plane::Orig, 0, 0),
                tok(Plane::Orig, 1, 0),
                tok(Plane::Orig, 0, 1),
                tok(Plane::Orig, 1, 1),
            ]
        );
        assert_eq!(cross_scale_interleave(3, 4), Err(TrajError::OddExtent { h: 3, w: 4 }));
    }

    #[test]
    fn extract_matches_hand_table() {
        // 4×4 full grid: slot of each row-major token, written out by hand.
        // down (0,0): slots 0..5 → orig (0,0)=1 (1,0)=2 (0,1)=3 (1,1)=4
        // down (0,1): slots 5..10 → (0,2)=6 (1,2)=7 (0,3)=8 (1,3)=9
        // down (1,0): slots 10..15 → (2,0)=11 (3,0)=12 (2,1)=13 (3,1)=14
        // down (1,1): slots 15..20 → (2,2)=16 (3,2)=17 (2,3)=18 (3,3)=19
        let expected = [1, 3, 6, 8, 2, 4, 7, 9, 11, 13, 16, 18, 12, 14, 17, 19];
        let l = cross_scale_interleave(4, 4).unwrap();
        assert_eq!(l.orig_slots(), expected);
        let seq = Tensor::<f64>::new(vec![20, 1], (0..20).map(f64::from).collect()).unwrap();
        let out = l.extract_original(&seq).unwrap();
        assert_eq!(out.shape(), &[16, 1]);
        let want: Vec<f64> = expected.iter().map(|&s| s as f64).collect();
        assert_eq!(out.data(), want.as_slice());
    }

    #[test]
    fn gather_length_mismatch() {
        let t = Trajectory::raster(2, 2, Direction::Horizontal);
        let x = Tensor::<f32>::zeros(vec![3, 2]);
        assert_eq!(t.gather(&x), Err(TrajError::Length { expected: 4, found: 3 }));
    }
}
