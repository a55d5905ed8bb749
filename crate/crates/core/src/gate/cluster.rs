use crate::error::{Error, Result};

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Symmetric matrix with unit diagonal.
pub fn similarity_matrix(vectors: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
    let n = vectors.len();
    let mut m = vec![vec![1.0; n]; n];
    for i in 0..n {
        cosine_similarity(vectors[i], vectors[i])?;
        for j in i + 1..n {
            let s = cosine_similarity(vectors[i], vectors[j])?;
            m[i][j] = s;
            m[j][i] = s;
        }
    }
    Ok(m)
}

/// Average-linkage agglomeration down to `n` clusters. Returns a one-based
/// cluster per item; clusters are numbered by their smallest member.
pub fn average_linkage(sim: &[Vec<f64>], n: usize) -> Result<Vec<usize>> {
    let items = sim.len();
    if n == 0 || n > items {
        return Err(Error::Config(format!("cannot form {n} clusters from {items} states")));
    }
    let mut clusters: Vec<Vec<usize>> = (0..items).map(|i| vec![i]).collect();
    while clusters.len() > n {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let mut total = 0.0;
                for &i in &clusters[a] {
                    for &j in &clusters[b] {
                        total += sim[i][j];
                    }
                }
                let mean = total / (clusters[a].len() * clusters[b].len()) as f64;
                if best.is_none_or(|(m, _, _)| mean > m) {
                    best = Some((mean, a, b));
                }
            }
        }
        let (_, a, b) = best.expect("at least two clusters");
        let moved = clusters.remove(b);
        clusters[a].extend(moved);
        clusters[a].sort_unstable();
    }
    clusters.sort_by_key(|c| c[0]);
    let mut out = vec![0; items];
    for (k, c) in clusters.iter().enumerate() {
        for &i in c {
            out[i] = k + 1;
        }
    }
    Ok(out)
}
