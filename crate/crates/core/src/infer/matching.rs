use super::DetectedPoint;
use crate::data::Nucleus;

/// One-to-one assignment of detections to annotated centroids.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// `(detection index, annotation index)` pairs.
    pub pairs: Vec<(usize, usize)>,
    /// `confusion[annotated][detected]` over matched pairs, `(K+1) x (K+1)`.
    /// Row and column 0 stay empty except for background-assigned detections
    /// in column 0, which classification metrics ignore.
    pub confusion: Vec<Vec<usize>>,
}

/// Matches detections to centroids within `radius`.
///
/// Pairs are first taken greedily by increasing distance (ties by detection
/// then annotation index). Greedy alone can strand a centroid whose only
/// nearby detection was taken by a closer centroid, so unmatched detections
/// then look for augmenting paths; the result is a maximum matching that
/// keeps the greedy pairs wherever possible.
pub fn match_points(points: &[DetectedPoint], nuclei: &[Nucleus], radius: f64, num_categories: usize) -> MatchResult {
    let r2 = radius * radius;
    let d2 = |p: &DetectedPoint, n: &Nucleus| {
        let (dr, dc) = (p.row as f64 - n.row as f64, p.col as f64 - n.col as f64);
        dr * dr + dc * dc
    };
    let mut edges: Vec<(f64, usize, usize)> = Vec::new();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); points.len()];
    for (i, p) in points.iter().enumerate() {
        for (j, n) in nuclei.iter().enumerate() {
            let d = d2(p, n);
            if d <= r2 {
                edges.push((d, i, j));
                adj[i].push(j);
            }
        }
    }
    edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    for (a, p) in adj.iter_mut().zip(points) {
        a.sort_by(|&x, &y| d2(p, &nuclei[x]).total_cmp(&d2(p, &nuclei[y])).then(x.cmp(&y)));
    }

    let mut det_of = vec![usize::MAX; nuclei.len()];
    let mut ann_of = vec![usize::MAX; points.len()];
    for &(_, i, j) in &edges {
        if ann_of[i] == usize::MAX && det_of[j] == usize::MAX {
            ann_of[i] = j;
            det_of[j] = i;
        }
    }

    fn augment(i: usize, adj: &[Vec<usize>], seen: &mut [bool], det_of: &mut [usize], ann_of: &mut [usize]) -> bool {
        for &j in &adj[i] {
            if seen[j] {
                continue;
            }
            seen[j] = true;
            if det_of[j] == usize::MAX || augment(det_of[j], adj, seen, det_of, ann_of) {
                det_of[j] = i;
                ann_of[i] = j;
                return true;
            }
        }
        false
    }
    for i in 0..points.len() {
        if ann_of[i] == usize::MAX && !adj[i].is_empty() {
            let mut seen = vec![false; nuclei.len()];
            augment(i, &adj, &mut seen, &mut det_of, &mut ann_of);
        }
    }

    let mut confusion = vec![vec![0; num_categories + 1]; num_categories + 1];
    let mut pairs = Vec::new();
    for (i, &j) in ann_of.iter().enumerate() {
        if j != usize::MAX {
            pairs.push((i, j));
            let a = (nuclei[j].category as usize).min(num_categories);
            let d = (points[i].category as usize).min(num_categories);
            confusion[a][d] += 1;
        }
    }
    let tp = pairs.len();
    MatchResult {
        tp,
        fp: points.len() - tp,
        fn_: nuclei.len() - tp,
        pairs,
        confusion,
    }
}
