use std::cmp::Ordering;

use super::{GeometryError, Vec3};

/// How equal distances are resolved during farthest-point sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TieBreak {
    /// Smallest (x, y, z) first, then lowest index. Independent of input order
    /// unless two points share all coordinates.
    #[default]
    Lexicographic,
    /// Lowest index only. Order-dependent; kept as a mutation hook.
    Index,
}

fn lex(a: &Vec3, b: &Vec3) -> Ordering {
    a[0].total_cmp(&b[0])
        .then(a[1].total_cmp(&b[1]))
        .then(a[2].total_cmp(&b[2]))
}

fn d2(a: &Vec3, b: &Vec3) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Greedy farthest-point sampling of `k` indices. The first pick is the
/// point farthest from the centroid; each later pick maximizes the distance
/// to the chosen set. Every prefix of the result is itself an FPS result.
pub fn farthest_point_sample(points: &[Vec3], k: usize) -> Result<Vec<usize>, GeometryError> {
    farthest_point_sample_with(points, k, TieBreak::Lexicographic)
}

pub fn farthest_point_sample_with(points: &[Vec3], k: usize, tie: TieBreak) -> Result<Vec<usize>, GeometryError> {
    let n = points.len();
    if k > n || k == 0 {
        return Err(GeometryError::TooFewPoints { k, n });
    }
    // Summing in sorted order makes the centroid bit-identical for any
    // permutation of the input.
    let mut sorted: Vec<&Vec3> = points.iter().collect();
    sorted.sort_by(|a, b| lex(a, b));
    let mut c = [0.0; 3];
    for p in &sorted {
        for j in 0..3 {
            c[j] += p[j];
        }
    }
    let c = c.map(|v| v / n as f64);

    // Strictly better candidate under (distance desc, tie rule).
    let better = |i: usize, di: f64, j: usize, dj: f64| -> bool {
        match di.total_cmp(&dj) {
            Ordering::Greater => true,
            Ordering::Less => false,
            Ordering::Equal => match tie {
                TieBreak::Lexicographic => match lex(&points[i], &points[j]) {
                    Ordering::Less => true,
                    Ordering::Greater => false,
                    Ordering::Equal => i < j,
                },
                TieBreak::Index => i < j,
            },
        }
    };

    let mut best = 0;
    let mut best_d = d2(&points[0], &c);
    for i in 1..n {
        let d = d2(&points[i], &c);
        if better(i, d, best, best_d) {
            best = i;
            best_d = d;
        }
    }
    let mut chosen = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut cur = best;
    loop {
        chosen.push(cur);
        taken[cur] = true;
        if chosen.len() == k {
            break;
        }
        let mut next = usize::MAX;
        let mut next_d = f64::NEG_INFINITY;
        for i in 0..n {
            if taken[i] {
                continue;
            }
            min_d[i] = min_d[i].min(d2(&points[i], &points[cur]));
            if next == usize::MAX || better(i, min_d[i], next, next_d) {
                next = i;
                next_d = min_d[i];
            }
        }
        cur = next;
    }
    Ok(chosen)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SQUARE: [Vec3; 4] = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]];

    #[test]
    fn unit_square_examples() {
        // all corners tie from the centroid; lexicographic rule picks (0,0,0)
        assert_eq!(farthest_point_sample(&SQUARE, 1).unwrap(), vec![0]);
        assert_eq!(farthest_point_sample(&SQUARE, 2).unwrap(), vec![0, 2]);
        assert!(farthest_point_sample(&SQUARE, 5).is_err());
    }

    #[test]
    fn tie_rule_is_order_independent_only_when_lexicographic() {
        let rev: Vec<Vec3> = SQUARE.iter().rev().copied().collect();
        let a = farthest_point_sample(&rev, 4).unwrap();
        let picked: Vec<Vec3> = a.iter().map(|&i| rev[i]).collect();
        let b = farthest_point_sample(&SQUARE, 4).unwrap();
        let expected: Vec<Vec3> = b.iter().map(|&i| SQUARE[i]).collect();
        assert_eq!(picked, expected);
        let c = farthest_point_sample_with(&rev, 1, TieBreak::Index).unwrap();
        assert_ne!(rev[c[0]], SQUARE[0]);
    }
}
