use crate::rng::Rng;

/// Side length of the anchor lattice strokes are drawn on.
pub const GRID: usize = 5;

const STREAM_SKELETON: u64 = 0x5eed_0000_0000;

#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    pub id: u64,
    pub strokes: Vec<Vec<(f64, f64)>>,
}

fn anchor(i: usize) -> f64 {
    0.15 + 0.175 * i as f64
}

/// 2 to 6 random-walk polylines over the anchor lattice, each 2 to 4 points
/// long with no immediate backtracking. Pure function of `(id, seed)`.
pub fn synth_skeleton(id: u64, seed: u64) -> Skeleton {
    let mut rng = Rng::derive(seed, STREAM_SKELETON ^ id);
    let n_strokes = 2 + rng.below(5) as usize;
    let mut strokes = Vec::with_capacity(n_strokes);
    for _ in 0..n_strokes {
        let mut at = (rng.below(GRID as u64) as i64, rng.below(GRID as u64) as i64);
        let len = 2 + rng.below(3) as usize;
        let mut pts = vec![at];
        let mut prev: Option<(i64, i64)> = None;
        while pts.len() < len {
            let moves: Vec<(i64, i64)> = (-1..=1)
                .flat_map(|dx| (-1..=1).map(move |dy| (dx, dy)))
                .filter(|&(dx, dy)| (dx, dy) != (0, 0))
                .filter(|&(dx, dy)| {
                    let (x, y) = (at.0 + dx, at.1 + dy);
                    (0..GRID as i64).contains(&x) && (0..GRID as i64).contains(&y) && Some((x, y)) != prev
                })
                .collect();
            let (dx, dy) = moves[rng.below(moves.len() as u64) as usize];
            prev = Some(at);
            at = (at.0 + dx, at.1 + dy);
            pts.push(at);
        }
        strokes.push(pts.into_iter().map(|(x, y)| (anchor(x as usize), anchor(y as usize))).collect());
    }
    Skeleton { id, strokes }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        assert_eq!(synth_skeleton(3, 11), synth_skeleton(3, 11));
        assert_ne!(synth_skeleton(3, 11), synth_skeleton(3, 12));
    }

    #[test]
    fn first_ten_ids_distinct() {
        let sk: Vec<_> = (0..10).map(|i| synth_skeleton(i, 7).strokes).collect();
        for i in 0..10 {
            for j in i + 1..10 {
                assert_ne!(sk[i], sk[j], "ids {i} and {j}");
            }
        }
    }

    #[test]
    fn structure_invariants() {
        for id in 0..200 {
            let s = synth_skeleton(id, 1);
            assert!((2..=6).contains(&s.strokes.len()));
            for st in &s.strokes {
                assert!((2..=4).contains(&st.len()));
                assert!(st.iter().all(|&(x, y)| (0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y)));
            }
        }
    }
}
