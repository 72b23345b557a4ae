//! Prototypical activity embedder.
//!
//! Embeddings are classified by a softmax over negative squared Euclidean
//! distances to class prototypes, each prototype being the mean of its
//! class's support embeddings. Episodes are carved out of a training batch:
//! per activity, the first half of its clips (rounded up) are supports and
//! the rest are queries.

use std::collections::BTreeMap;

use crate::autodiff::{softmax_raw, Graph, Var};
use crate::error::{AfnError, Result};
use crate::tensor::{argmax, Real, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Prototype<F> {
    pub label: usize,
    pub centroid: Vec<F>,
}

/// Support and query embeddings with their activity labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode<F> {
    pub support: Vec<(Vec<F>, usize)>,
    pub query: Vec<(Vec<F>, usize)>,
}

impl<F: Real> Episode<F> {
    pub fn validate(&self) -> Result<()> {
        let classes: std::collections::BTreeSet<usize> = self.support.iter().map(|s| s.1).collect();
        if let Some((_, missing)) = self.query.iter().find(|q| !classes.contains(&q.1)) {
            return Err(AfnError::Invalid(format!("query class {missing} has no support")));
        }
        Ok(())
    }
}

/// Support/query index split of a batch, by activity.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpisodeSplit {
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

pub fn split_episode(activities: &[usize]) -> EpisodeSplit {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &a) in activities.iter().enumerate() {
        by_class.entry(a).or_default().push(i);
    }
    let mut split = EpisodeSplit {
        support: Vec::new(),
        query: Vec::new(),
    };
    for members in by_class.values() {
        let n_support = members.len().div_ceil(2);
        split.support.extend(&members[..n_support]);
        split.query.extend(&members[n_support..]);
    }
    split
}

/// One centroid per support class, ordered by label.
pub fn compute_prototypes<F: Real>(episode: &Episode<F>) -> Result<Vec<Prototype<F>>> {
    episode.validate()?;
    let mut sums: BTreeMap<usize, (Vec<F>, usize)> = BTreeMap::new();
    for (emb, label) in &episode.support {
        let entry = sums.entry(*label).or_insert_with(|| (vec![F::zero(); emb.len()], 0));
        if entry.0.len() != emb.len() {
            return Err(AfnError::dim("compute_prototypes", &[entry.0.len()], &[emb.len()]));
        }
        for (s, &x) in entry.0.iter_mut().zip(emb) {
            *s = *s + x;
        }
        entry.1 += 1;
    }
    if sums.is_empty() {
        return Err(AfnError::Invalid("episode has no support examples".into()));
    }
    Ok(sums
        .into_iter()
        .map(|(label, (sum, n))| Prototype {
            label,
            centroid: sum.into_iter().map(|s| s / F::of(n as f64)).collect(),
        })
        .collect())
}

pub fn squared_distance<F: Real>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Softmax over negative squared distances, in prototype order.
pub fn classify_activity<F: Real>(u: &[F], prototypes: &[Prototype<F>]) -> Result<Vec<F>> {
    if prototypes.is_empty() {
        return Err(AfnError::Invalid("no prototypes".into()));
    }
    let mut logits = Vec::with_capacity(prototypes.len());
    for p in prototypes {
        if p.centroid.len() != u.len() {
            return Err(AfnError::dim("classify_activity", &[u.len()], &[p.centroid.len()]));
        }
        logits.push(-squared_distance(u, &p.centroid));
    }
    Ok(softmax_raw(&logits))
}

/// Predicted activity label for `u`.
pub fn predict_activity<F: Real>(u: &[F], prototypes: &[Prototype<F>]) -> Result<usize> {
    let probs = classify_activity(u, prototypes)?;
    Ok(prototypes[argmax(&probs)].label)
}

/// Fraction of queries classified correctly.
pub fn episode_accuracy<F: Real>(episode: &Episode<F>) -> Result<f64> {
    let protos = compute_prototypes(episode)?;
    if episode.query.is_empty() {
        return Err(AfnError::Invalid("episode has no queries".into()));
    }
    let mut correct = 0;
    for (u, label) in &episode.query {
        if predict_activity(u, &protos)? == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / episode.query.len() as f64)
}

/// Differentiable mean query cross-entropy of an episode whose embeddings
/// live on `g`. Returns `None` when there are no queries.
pub fn proto_loss<F: Real>(g: &mut Graph<'_, F>, support: &[(Var, usize)], query: &[(Var, usize)]) -> Result<Option<Var>> {
    if query.is_empty() {
        return Ok(None);
    }
    let mut classes: BTreeMap<usize, Vec<Var>> = BTreeMap::new();
    for &(v, label) in support {
        classes.entry(label).or_default().push(v);
    }
    let mut centroids = Vec::with_capacity(classes.len());
    let mut labels = Vec::with_capacity(classes.len());
    for (label, members) in &classes {
        let mut acc = members[0];
        for &m in &members[1..] {
            acc = g.add(acc, m)?;
        }
        centroids.push(g.scale(acc, F::of(1.0 / members.len() as f64))?);
        labels.push(*label);
    }
    let mut total: Option<Var> = None;
    for &(u, label) in query {
        let target_idx = labels
            .iter()
            .position(|&l| l == label)
            .ok_or_else(|| AfnError::Invalid(format!("query class {label} has no support")))?;
        let mut neg = Vec::with_capacity(centroids.len());
        for &c in &centroids {
            let diff = g.sub(u, c)?;
            let sq = g.mul(diff, diff)?;
            let d = g.sum(sq)?;
            neg.push(g.scale(d, -F::one())?);
        }
        let logits = g.concat(&neg)?;
        let probs = g.softmax(logits)?;
        let mut target = Tensor::zeros(&[centroids.len()]);
        target.data_mut()[target_idx] = F::one();
        let ce = g.cross_entropy(&target, probs)?;
        total = Some(match total {
            Some(t) => g.add(t, ce)?,
            None => ce,
        });
    }
    let total = total.expect("query is non-empty");
    Ok(Some(g.scale(total, F::of(1.0 / query.len() as f64))?))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn prototypes_are_means() {
        let ep = Episode {
            support: vec![(vec![0.0, 0.0], 0), (vec![2.0, 2.0], 0), (vec![5.0, -1.0], 1)],
            query: vec![],
        };
        let p = compute_prototypes(&ep).unwrap();
        assert_eq!(p[0].centroid, vec![1.0, 1.0]);
        assert_eq!(p[1].centroid, vec![5.0, -1.0]);
    }

    #[test]
    fn random_episode_matches_brute_force_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let support: Vec<(Vec<f64>, usize)> = (0..40)
            .map(|i| ((0..6).map(|_| rng.random_range(-3.0..3.0)).collect(), i % 5))
            .collect();
        let ep = Episode {
            support: support.clone(),
            query: vec![],
        };
        let protos = compute_prototypes(&ep).unwrap();
        for p in &protos {
            let members: Vec<&Vec<f64>> = support.iter().filter(|s| s.1 == p.label).map(|s| &s.0).collect();
            for d in 0..6 {
                let mean = members.iter().map(|m| m[d]).sum::<f64>() / members.len() as f64;
                assert!((p.centroid[d] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn prototypes_ignore_support_order() {
        let support = vec![(vec![1.0f64, 0.5], 0), (vec![0.25, 2.0], 0), (vec![3.0, 3.0], 1), (vec![-1.0, 0.0], 0)];
        let mut rev = support.clone();
        rev.reverse();
        let a = compute_prototypes(&Episode { support, query: vec![] }).unwrap();
        let b = compute_prototypes(&Episode { support: rev, query: vec![] }).unwrap();
        for (x, y) in a.iter().zip(&b) {
            for (p, q) in x.centroid.iter().zip(&y.centroid) {
                assert!((p - q).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn classification_limits() {
        let protos = vec![
            Prototype { label: 0, centroid: vec![0.0, 0.0] },
            Prototype { label: 1, centroid: vec![100.0, 0.0] },
        ];
        let p = classify_activity(&[0.0, 0.0], &protos).unwrap();
        assert!(p[0] > 1.0 - 1e-12);
        let p: Vec<f64> = classify_activity(&[50.0, 3.0], &protos).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);
        assert!(classify_activity(&[0.0], &protos).is_err());
    }

    #[test]
    fn query_without_support_is_rejected() {
        let ep = Episode {
            support: vec![(vec![0.0], 0)],
            query: vec![(vec![0.0], 1)],
        };
        assert!(compute_prototypes(&ep).is_err());
    }

    #[test]
    fn split_by_activity() {
        let s = split_episode(&[2, 0, 2, 2, 1, 0]);
        assert_eq!(s.support, vec![1, 4, 0, 2]);
        assert_eq!(s.query, vec![5, 3]);
    }

    #[test]
    fn loss_limits() {
        // Perfect separation.
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let b = g.constant(Tensor::vector(vec![100.0, 0.0]));
        let qa = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let l = proto_loss(&mut g, &[(a, 0), (b, 1)], &[(qa, 0)]).unwrap().unwrap();
        assert!(g.scalar(l) <= 1e-6);

        // Equidistant from three prototypes: uniform prediction, loss ln 3.
        let mut g = Graph::<f64>::new();
        let s: Vec<(Var, usize)> = [[1.0, 0.0], [-0.5, 0.75f64.sqrt()], [-0.5, -(0.75f64.sqrt())]]
            .iter()
            .enumerate()
            .map(|(k, c)| (g.constant(Tensor::vector(c.to_vec())), k))
            .collect();
        let q = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let l = proto_loss(&mut g, &s, &[(q, 2)]).unwrap().unwrap();
        assert!((g.scalar(l) - 3f64.ln()).abs() < 1e-12);

        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::vector(vec![0.0]));
        assert!(proto_loss(&mut g, &[(a, 0)], &[]).unwrap().is_none());
    }

    #[test]
    fn argmax_invariant_to_common_distance_offset() {
        let protos = vec![
            Prototype { label: 0, centroid: vec![0.0, 1.0] },
            Prototype { label: 1, centroid: vec![2.0, 0.0] },
            Prototype { label: 2, centroid: vec![-1.0, -1.0] },
        ];
        let u = [0.4, 0.1];
        let base: Vec<f64> = protos.iter().map(|p| -squared_distance(&u, &p.centroid)).collect();
        let shifted: Vec<f64> = base.iter().map(|d| d - 7.5).collect();
        assert_eq!(argmax(&softmax_raw(&base)), argmax(&softmax_raw(&shifted)));
        assert_eq!(argmax(&classify_activity(&u, &protos).unwrap()), argmax(&base));
    }
}
