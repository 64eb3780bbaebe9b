//! Broadcasting rule: shapes are right-aligned; each aligned pair of
//! dimensions must be equal or one of them must be 1; missing leading
//! dimensions count as 1.

use super::{numel, Result, TensorError};

pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "broadcast",
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For every flat index of `out`, the flat index of the broadcast input.
pub fn index_map(out: &[usize], input: &[usize]) -> Vec<usize> {
    let n = numel(out);
    let rank = out.len();
    let offset = rank - input.len();
    let in_strides = strides(input);
    // Effective stride of each output dimension into the input (0 when broadcast).
    let eff: Vec<usize> = (0..rank)
        .map(|d| {
            if d < offset || input[d - offset] == 1 {
                0
            } else {
                in_strides[d - offset]
            }
        })
        .collect();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..n {
        map.push(cur);
        for d in (0..rank).rev() {
            idx[d] += 1;
            cur += eff[d];
            if idx[d] < out[d] {
                break;
            }
            cur -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

/// How an input of a broadcasting binary op lines up with the output.
pub(crate) enum Plan {
    Same,
    /// input index = i % n (trailing-dimension broadcast, e.g. a bias row)
    Tile(usize),
    /// input index = i / n (a trailing singleton, e.g. a per-row scale)
    Repeat(usize),
    General(Vec<usize>),
}

impl Plan {
    pub fn new(out: &[usize], input: &[usize]) -> Plan {
        let n_out = numel(out);
        let n_in = numel(input);
        if n_out == n_in {
            return Plan::Same;
        }
        let offset = out.len() - input.len();
        // Strip leading ones of the input.
        let first = input.iter().position(|&d| d != 1).unwrap_or(input.len());
        if input[first..] == out[offset + first..] {
            return Plan::Tile(n_in);
        }
        // Input equals the out prefix followed by trailing ones.
        let last = input.iter().rposition(|&d| d != 1).map_or(0, |p| p + 1);
        if offset == 0 && input[..last] == out[..last] {
            let inner: usize = out[last..].iter().product();
            return Plan::Repeat(inner);
        }
        Plan::General(index_map(out, input))
    }

    #[inline]
    pub fn at(&self, i: usize) -> usize {
        match self {
            Plan::Same => i,
            Plan::Tile(n) => i % n,
            Plan::Repeat(n) => i / n,
            Plan::General(m) => m[i],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_follow_numpy_rule() {
        assert_eq!(broadcast_shapes(&[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shapes(&[4, 1, 3], &[2, 1]).unwrap(), vec![4, 2, 3]);
        assert_eq!(broadcast_shapes(&[], &[5]).unwrap(), vec![5]);
        assert!(broadcast_shapes(&[2, 3], &[2]).is_err());
    }

    #[test]
    fn plans_agree_with_general_map() {
        let cases: &[(&[usize], &[usize])] = &[
            (&[2, 3], &[3]),
            (&[2, 3], &[2, 1]),
            (&[2, 3, 4], &[1, 3, 1]),
            (&[2, 3, 4], &[4]),
            (&[2, 3, 4], &[2, 1, 1]),
            (&[5], &[]),
        ];
        for (out, input) in cases {
            let plan = Plan::new(out, input);
            let map = index_map(out, input);
            for (i, &m) in map.iter().enumerate() {
                assert_eq!(plan.at(i), m, "out {out:?} in {input:?} at {i}");
            }
        }
    }
}
