use std::collections::{BTreeSet, HashMap};

/// Every `(substitutions, deletions, insertions)` triple reachable by some
/// alignment of `r` against `h`. Matches are free and not counted.
pub fn enumerate_counts(r: &[usize], h: &[usize]) -> BTreeSet<(usize, usize, usize)> {
    fn go(
        r: &[usize],
        h: &[usize],
        i: usize,
        j: usize,
        memo: &mut HashMap<(usize, usize), BTreeSet<(usize, usize, usize)>>,
    ) -> BTreeSet<(usize, usize, usize)> {
        if let Some(s) = memo.get(&(i, j)) {
            return s.clone();
        }
        let mut out = BTreeSet::new();
        if i == r.len() && j == h.len() {
            out.insert((0, 0, 0));
        }
        if i < r.len() && j < h.len() {
            let sub = usize::from(r[i] != h[j]);
            for (s, d, n) in go(r, h, i + 1, j + 1, memo) {
                out.insert((s + sub, d, n));
            }
        }
        if i < r.len() {
            for (s, d, n) in go(r, h, i + 1, j, memo) {
                out.insert((s, d + 1, n));
            }
        }
        if j < h.len() {
            for (s, d, n) in go(r, h, i, j + 1, memo) {
                out.insert((s, d, n + 1));
            }
        }
        memo.insert((i, j), out.clone());
        out
    }
    go(r, h, 0, 0, &mut HashMap::new())
}

/// Minimum total edits; ties broken toward more substitutions.
pub fn oracle_counts(r: &[usize], h: &[usize]) -> (usize, usize, usize) {
    enumerate_counts(r, h)
        .into_iter()
        .min_by_key(|&(s, d, n)| (s + d + n, std::cmp::Reverse(s)))
        .expect("at least one alignment exists")
}
