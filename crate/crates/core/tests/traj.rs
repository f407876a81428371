use mambacsr::traj::{
    cross_scale_interleave, schedule_for_block, Direction, Granularity, Plane, Trajectory,
};
use mambacsr::Tensor;
use proptest::prelude::*;

fn direction() -> impl Strategy<Value = Direction> {
    prop_oneof![Just(Direction::Horizontal), Just(Direction::Vertical)]
}

fn is_permutation(p: &[usize]) -> bool {
    let mut seen = vec![false; p.len()];
    p.iter().all(|&i| i < p.len() && !std::mem::replace(&mut seen[i], true))
}

proptest! {
    #[test]
    fn window_raster_is_bijective(h in 1usize..24, w in 1usize..24, win in 1usize..20, dir in direction()) {
        let t = Trajectory::window_raster(h, w, win, dir).unwrap();
        prop_assert_eq!(t.len(), h * w);
        prop_assert!(is_permutation(t.perm()));
        for k in 0..t.len() {
            prop_assert_eq!(t.inv_perm()[t.perm()[k]], k);
        }
    }

    #[test]
    fn flip_is_an_involution(h in 1usize..16, w in 1usize..16, win in 1usize..10, dir in direction()) {
        let t = Trajectory::window_raster(h, w, win, dir).unwrap();
        let f = t.flip();
        prop_assert_eq!(&f.flip(), &t);
        let n = t.len();
        for k in 0..n {
            prop_assert_eq!(f.perm()[k], t.perm()[n - 1 - k]);
        }
    }

    #[test]
    fn covering_window_degenerates_to_raster(h in 1usize..16, w in 1usize..16, extra in 0usize..4, dir in direction()) {
        let win = h.max(w) + extra;
        prop_assert_eq!(Trajectory::window_raster(h, w, win, dir).unwrap(), Trajectory::raster(h, w, dir));
    }

    #[test]
    fn windows_are_visited_contiguously(h in 1usize..20, w in 1usize..20, win in 1usize..8, dir in direction()) {
        let t = Trajectory::window_raster(h, w, win, dir).unwrap();
        let window_of = |k: usize| {
            let (r, c) = t.coords(k);
            (r / win, c / win)
        };
        let mut finished = std::collections::HashSet::new();
        for k in 1..t.len() {
            let (a, b) = (window_of(k - 1), window_of(k));
            if a != b {
                prop_assert!(finished.insert(a), "window {:?} revisited", a);
                prop_assert!(!finished.contains(&b));
            }
        }
    }

    #[test]
    fn gather_then_scatter_is_identity(h in 1usize..10, w in 1usize..10, win in 1usize..6, d in 1usize..4, dir in direction()) {
        let t = Trajectory::window_raster(h, w, win, dir).unwrap();
        let x = Tensor::new(vec![h * w, d], (0..h * w * d).map(|v| v as f64).collect()).unwrap();
        let g = t.gather(&x).unwrap();
        prop_assert_eq!(&t.scatter(&g).unwrap(), &x);
        for k in 0..t.len() {
            prop_assert_eq!(g.data()[k * d], x.data()[t.perm()[k] * d]);
        }
    }

    #[test]
    fn cross_scale_is_one_to_four_and_aligned(dh in 1usize..12, dw in 1usize..12) {
        let (h, w) = (2 * dh, 2 * dw);
        let lay = cross_scale_interleave(h, w).unwrap();
        prop_assert_eq!(lay.len(), 5 * dh * dw);
        for chunk in lay.sequence.chunks(5) {
            prop_assert_eq!(chunk[0].plane, Plane::Down);
            let (i, j) = (chunk[0].row, chunk[0].col);
            for t in &chunk[1..] {
                prop_assert_eq!(t.plane, Plane::Orig);
                prop_assert_eq!((t.row / 2, t.col / 2), (i, j));
            }
        }
        prop_assert!(is_permutation(&lay.gather_indices()));
        let slots = lay.orig_slots();
        prop_assert_eq!(slots.len(), h * w);
        prop_assert!(slots.iter().all(|&s| lay.sequence[s].plane == Plane::Orig));

        let down = Tensor::new(vec![dh * dw, 1], vec![-1.0; dh * dw]).unwrap();
        let orig = Tensor::new(vec![h * w, 1], (0..h * w).map(|v| v as f64).collect()).unwrap();
        let seq = lay.interleave(&down, &orig).unwrap();
        prop_assert_eq!(lay.extract_original(&seq).unwrap(), orig);
    }
}

#[test]
fn odd_extents_have_no_cross_layout() {
    assert!(cross_scale_interleave(5, 4).is_err());
    assert!(cross_scale_interleave(4, 7).is_err());
}

#[test]
fn schedule_alternates_granularity_every_two_blocks() {
    let kinds: Vec<_> = (0..8)
        .map(|k| {
            let s = schedule_for_block(k, 8);
            (matches!(s.granularity, Granularity::Window(8)), s.direction)
        })
        .collect();
    use Direction::{Horizontal as H, Vertical as V};
    assert_eq!(
        kinds,
        vec![(true, H), (true, V), (false, H), (false, V), (true, H), (true, V), (false, H), (false, V)]
    );
    let [t, f] = schedule_for_block(2, 8).pair(4, 4, 64).unwrap();
    assert_eq!(t, Trajectory::raster(4, 4, Direction::Horizontal));
    assert_eq!(f, t.flip());
}

#[test]
fn from_perm_rejects_non_bijections() {
    assert!(Trajectory::from_perm(2, 2, vec![0, 1, 1, 3]).is_err());
    assert!(Trajectory::from_perm(2, 2, vec![0, 1, 2]).is_err());
    assert!(Trajectory::from_perm(2, 2, vec![0, 1, 2, 4]).is_err());
    assert!(Trajectory::window_raster(2, 2, 0, Direction::Vertical).is_err());
}
