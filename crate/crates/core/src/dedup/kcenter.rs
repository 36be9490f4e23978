//! Greedy farthest-point selection inside one cluster.

/// Below this, two unit vectors are treated as identical whatever `δ` is.
pub const DUPLICATE_EPSILON: f64 = 1e-12;

pub fn cosine_distance(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    (1.0 - dot).max(0.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dropped {
    pub id: String,
    /// Nearest kept member and the cosine distance to it.
    pub nearest: String,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Selection {
    /// Kept ids in selection order.
    pub kept: Vec<String>,
    pub dropped: Vec<Dropped>,
}

/// Keeps members whose cosine distance to every previously kept member is at
/// least `delta`, starting from the member nearest the centroid and always
/// adding the farthest remaining one. Ties go to the lexicographically
/// smallest id. Vectors are expected to be unit length.
pub fn kcenter_prune(members: &[(&str, &[f64])], centroid: &[f64], delta: f64) -> Selection {
    if members.is_empty() {
        return Selection::default();
    }
    let mut order: Vec<usize> = (0..members.len()).collect();
    order.sort_by(|&a, &b| members[a].0.cmp(members[b].0));

    let sq = |v: &[f64]| -> f64 { v.iter().zip(centroid).map(|(a, b)| (a - b) * (a - b)).sum() };
    let mut start = order[0];
    let mut start_d = sq(members[start].1);
    for &i in &order[1..] {
        let d = sq(members[i].1);
        if d < start_d {
            start = i;
            start_d = d;
        }
    }

    let n = members.len();
    let mut is_kept = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut nearest = vec![start; n];
    let mut kept = Vec::new();

    let mut add =
        |c: usize, is_kept: &mut Vec<bool>, min_d: &mut Vec<f64>, nearest: &mut Vec<usize>| {
            is_kept[c] = true;
            kept.push(members[c].0.to_string());
            for j in 0..n {
                if is_kept[j] {
                    continue;
                }
                let d = cosine_distance(members[j].1, members[c].1);
                if d < min_d[j] || (d == min_d[j] && members[c].0 < members[nearest[j]].0) {
                    min_d[j] = d;
                    nearest[j] = c;
                }
            }
        };
    add(start, &mut is_kept, &mut min_d, &mut nearest);
    loop {
        let mut best: Option<usize> = None;
        for &i in &order {
            if !is_kept[i] && best.is_none_or(|b| min_d[i] > min_d[b]) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        if min_d[b] < delta || min_d[b] <= DUPLICATE_EPSILON {
            break;
        }
        add(b, &mut is_kept, &mut min_d, &mut nearest);
    }

    let dropped = order
        .iter()
        .filter(|&&i| !is_kept[i])
        .map(|&i| Dropped {
            id: members[i].0.to_string(),
            nearest: members[nearest[i]].0.to_string(),
            distance: min_d[i],
        })
        .collect();
    Selection { kept, dropped }
}
