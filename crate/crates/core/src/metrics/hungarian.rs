/// A maximum-profit one-to-one matching between rows and columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `(row, col)` pairs, sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub total: f64,
}

/// Maximum-profit assignment on a rectangular `profit` matrix, solved with
/// the O(n³) potentials method on the zero-padded square problem. Every row
/// of the smaller side is matched.
pub fn hungarian(profit: &[Vec<f64>]) -> Assignment {
    let m = profit.len();
    let n = profit.first().map_or(0, Vec::len);
    if m == 0 || n == 0 {
        return Assignment {
            pairs: Vec::new(),
            total: 0.0,
        };
    }
    let s = m.max(n);
    let cost = |i: usize, j: usize| -> f64 {
        if i < m && j < n {
            -profit[i][j]
        } else {
            0.0
        }
    };
    // 1-based arrays: p[j] is the row matched to column j
    let mut u = vec![0.0; s + 1];
    let mut v = vec![0.0; s + 1];
    let mut p = vec![0usize; s + 1];
    let mut way = vec![0usize; s + 1];
    for i in 1..=s {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; s + 1];
        let mut used = vec![false; s + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=s {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=s {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=s)
        .filter(|&j| p[j] >= 1 && p[j] - 1 < m && j - 1 < n)
        .map(|j| (p[j] - 1, j - 1))
        .collect();
    pairs.sort_unstable();
    let total = pairs.iter().map(|&(i, j)| profit[i][j]).sum();
    Assignment { pairs, total }
}
