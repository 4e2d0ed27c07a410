//! Training objectives.
//!
//! Every loss is built on a [`Tape`] from a `[N, D]` matrix of unit-length
//! utterance representations, so gradients flow back into the encoder.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

fn check_temperature(op: &'static str, tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(op, format!("temperature must be positive, got {tau}")))
    }
}

/// Keeps at most `cap` of `candidates`, sampled without replacement.
fn subsample(candidates: Vec<usize>, cap: Option<usize>, rng: &mut impl Rng) -> Vec<usize> {
    match cap {
        Some(cap) if candidates.len() > cap => index::sample(rng, candidates.len(), cap)
            .into_iter()
            .map(|k| candidates[k])
            .collect(),
        _ => candidates,
    }
}

/// Shared form of the utterance-level losses:
///
/// `sum_i  -1/|P(i)|  sum_{j in P(i)}  log( e^{s_ij} / (e^{s_ij} + sum_{l in N(i)} e^{s_il}) )`
///
/// with `s = v_i . v_j / tau`. The denominator holds the current positive and
/// the negatives only, never the other positives.
fn pair_contrastive(tape: &mut Tape, v: Var, positives: &[Vec<usize>], negatives: &[Vec<usize>], tau: f64) -> Result<Var> {
    let n = tape.shape(v)[0];
    let mut pos_w = vec![0.0; n * n];
    let mut neg_mask = vec![0.0; n * n];
    for i in 0..n {
        if positives[i].is_empty() {
            continue;
        }
        let w = 1.0 / positives[i].len() as f64;
        for &j in &positives[i] {
            pos_w[i * n + j] = w;
        }
        for &l in &negatives[i] {
            neg_mask[i * n + l] = 1.0;
        }
    }
    let vt = tape.transpose(v)?;
    let sims = tape.matmul(v, vt)?;
    let logits = tape.scale(sims, 1.0 / tau)?;
    let e = tape.exp(logits)?;
    let neg_mask = tape.constant(Tensor::from_parts(vec![n, n], neg_mask));
    let neg_terms = tape.mul(e, neg_mask)?;
    let ones_col = tape.constant(Tensor::filled(&[n, 1], 1.0));
    let neg_sum = tape.matmul(neg_terms, ones_col)?;
    let ones_row = tape.constant(Tensor::filled(&[1, n], 1.0));
    let neg_sum = tape.matmul(neg_sum, ones_row)?;
    let denom = tape.add(e, neg_sum)?;
    let log_denom = tape.log(denom)?;
    let terms = tape.sub(log_denom, logits)?;
    let pos_w = tape.constant(Tensor::from_parts(vec![n, n], pos_w));
    let weighted = tape.mul(terms, pos_w)?;
    tape.sum(weighted)
}

/// Supervised utterance-level loss `L_u`. Positives share the anchor's
/// label; negatives carry any other label and are subsampled to
/// `negative_cap` per anchor.
pub fn utterance_contrastive(
    tape: &mut Tape,
    v: Var,
    labels: &[usize],
    tau: f64,
    negative_cap: Option<usize>,
    rng: &mut impl Rng,
) -> Result<Var> {
    check_temperature("utterance_contrastive", tau)?;
    let n = tape.shape(v)[0];
    if labels.len() != n || n < 2 {
        return Err(Error::domain(
            "utterance_contrastive",
            format!("need at least 2 representations with one label each, got {n} and {}", labels.len()),
        ));
    }
    let mut positives = Vec::with_capacity(n);
    let mut negatives = Vec::with_capacity(n);
    for i in 0..n {
        let pos: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        let neg = if pos.is_empty() {
            Vec::new()
        } else {
            subsample((0..n).filter(|&l| labels[l] != labels[i]).collect(), negative_cap, rng)
        };
        positives.push(pos);
        negatives.push(neg);
    }
    pair_contrastive(tape, v, &positives, &negatives, tau)
}

/// Unsupervised utterance-level loss `L'_u`. Positives are other turns of
/// the same speaker in the same conversation; negatives are utterances of
/// other conversations in the batch.
pub fn speaker_contrastive(
    tape: &mut Tape,
    v: Var,
    conversation_of: &[usize],
    speakers: &[String],
    tau: f64,
    negative_cap: Option<usize>,
    rng: &mut impl Rng,
) -> Result<Var> {
    check_temperature("speaker_contrastive", tau)?;
    let n = tape.shape(v)[0];
    if conversation_of.len() != n || speakers.len() != n {
        return Err(Error::domain("speaker_contrastive", "one conversation id and speaker per row required"));
    }
    if conversation_of.iter().all(|&c| c == conversation_of[0]) {
        return Err(Error::domain(
            "speaker_contrastive",
            "batch needs at least two conversations to draw negatives from",
        ));
    }
    let lowered: Vec<String> = speakers.iter().map(|s| s.to_lowercase()).collect();
    let mut positives = Vec::with_capacity(n);
    let mut negatives = Vec::with_capacity(n);
    for i in 0..n {
        let pos: Vec<usize> = (0..n)
            .filter(|&j| j != i && conversation_of[j] == conversation_of[i] && lowered[j] == lowered[i])
            .collect();
        let neg = if pos.is_empty() {
            Vec::new()
        } else {
            subsample(
                (0..n).filter(|&l| conversation_of[l] != conversation_of[i]).collect(),
                negative_cap,
                rng,
            )
        };
        positives.push(pos);
        negatives.push(neg);
    }
    pair_contrastive(tape, v, &positives, &negatives, tau)
}

/// Unit-length session means, one row per distinct label in ascending label
/// order.
#[derive(Clone, Copy, Debug)]
pub struct SessionPrototypes {
    pub prototypes: Var,
}

/// Sorted distinct labels and, for every row, its prototype row.
pub fn dense_labels(labels: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut distinct = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let dense = labels
        .iter()
        .map(|l| distinct.binary_search(l).expect("label present"))
        .collect();
    (distinct, dense)
}

/// Row-stochastic `[groups, n]` matrix averaging the members of each group.
pub(crate) fn averaging_matrix(assignment: &[usize], groups: usize) -> Tensor {
    let n = assignment.len();
    let mut counts = vec![0usize; groups];
    for &a in assignment {
        counts[a] += 1;
    }
    let mut data = vec![0.0; groups * n];
    for (i, &a) in assignment.iter().enumerate() {
        data[a * n + i] = 1.0 / counts[a] as f64;
    }
    Tensor::from_parts(vec![groups, n], data)
}

/// `p = normalize(mean of member v's)` for each session.
pub fn session_prototypes(tape: &mut Tape, v: Var, labels: &[usize]) -> Result<SessionPrototypes> {
    let n = tape.shape(v)[0];
    if labels.len() != n {
        return Err(Error::domain("session_prototypes", "one label per representation required"));
    }
    let (distinct, dense) = dense_labels(labels);
    let avg = tape.constant(averaging_matrix(&dense, distinct.len()));
    let means = tape.matmul(avg, v)?;
    let prototypes = tape.l2_normalize(means)?;
    Ok(SessionPrototypes { prototypes })
}

/// Cross-entropy of each row's logits against its target column.
fn softmax_nll(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    let shape = tape.shape(logits).to_vec();
    let (rows, cols) = (shape[0], shape[1]);
    let mut onehot = vec![0.0; rows * cols];
    for (r, &t) in targets.iter().enumerate() {
        onehot[r * cols + t] = 1.0;
    }
    let probs = tape.softmax(logits)?;
    let logp = tape.log(probs)?;
    let mask = tape.constant(Tensor::from_parts(vec![rows, cols], onehot));
    let picked = tape.mul(logp, mask)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0)
}

/// Session-level loss `L_s`: each utterance against all prototypes of its
/// conversation, its own session's prototype as the target.
pub fn session_contrastive(tape: &mut Tape, v: Var, prototypes: &SessionPrototypes, labels: &[usize], tau: f64) -> Result<Var> {
    check_temperature("session_contrastive", tau)?;
    let (distinct, dense) = dense_labels(labels);
    if tape.shape(prototypes.prototypes)[0] != distinct.len() {
        return Err(Error::domain("session_contrastive", "prototype count differs from label count"));
    }
    let pt = tape.transpose(prototypes.prototypes)?;
    let sims = tape.matmul(v, pt)?;
    let logits = tape.scale(sims, 1.0 / tau)?;
    softmax_nll(tape, logits, &dense)
}

/// Centroid matching loss `L_m`: mean Euclidean distance over matched
/// `(prototype row, centroid row)` pairs.
pub fn centroid_matching(tape: &mut Tape, prototypes: Var, centroids: Var, pairs: &[(usize, usize)]) -> Result<Var> {
    let (np, nc) = (tape.shape(prototypes)[0], tape.shape(centroids)[0]);
    let mut seen_p = vec![false; np];
    let mut seen_c = vec![false; nc];
    for &(p, c) in pairs {
        if p >= np || c >= nc || seen_p[p] || seen_c[c] {
            return Err(Error::domain("centroid_matching", format!("matching is not a bijection at pair ({p}, {c})")));
        }
        seen_p[p] = true;
        seen_c[c] = true;
    }
    if pairs.is_empty() {
        return Err(Error::domain("centroid_matching", "empty matching"));
    }
    let prow: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let crow: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let p = tape.gather_rows(prototypes, &prow)?;
    let c = tape.gather_rows(centroids, &crow)?;
    let diff = tape.sub(p, c)?;
    let dist = tape.row_norm(diff)?;
    tape.mean(dist)
}

/// A frozen clustering of one conversation used as an EM target.
#[derive(Clone, Debug, PartialEq)]
pub struct EmTarget {
    pub assignment: Vec<usize>,
    /// `[k, D]`, unit rows.
    pub centroids: Tensor,
}

/// Prototypical loss `L'_s`, averaged over the clusterings. Centroids and
/// assignments enter as constants.
pub fn prototypical_em_loss(tape: &mut Tape, v: Var, clusterings: &[EmTarget], tau: f64) -> Result<Var> {
    check_temperature("prototypical_em_loss", tau)?;
    if clusterings.is_empty() {
        return Err(Error::domain("prototypical_em_loss", "no clusterings"));
    }
    let n = tape.shape(v)[0];
    let mut terms = Vec::with_capacity(clusterings.len());
    for target in clusterings {
        let k = target.centroids.rows();
        if target.assignment.len() != n || target.assignment.iter().any(|&a| a >= k) {
            return Err(Error::domain("prototypical_em_loss", "assignment does not cover every row"));
        }
        let c = tape.constant(target.centroids.clone());
        let ct = tape.transpose(c)?;
        let sims = tape.matmul(v, ct)?;
        let logits = tape.scale(sims, 1.0 / tau)?;
        terms.push(softmax_nll(tape, logits, &target.assignment)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    tape.scale(total, 1.0 / terms.len() as f64)
}

/// Component values of a training objective and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_u: Option<f64>,
    pub l_s: Option<f64>,
    pub l_k: Option<f64>,
    pub l_m: Option<f64>,
    pub l_u_prime: Option<f64>,
    pub l_s_prime: Option<f64>,
    pub total: f64,
}

/// `L_u + alpha L_s + beta L_k + gamma L_m`.
pub fn supervised_objective(l_u: f64, l_s: f64, l_k: f64, l_m: f64, alpha: f64, beta: f64, gamma: f64) -> LossBreakdown {
    LossBreakdown {
        l_u: Some(l_u),
        l_s: Some(l_s),
        l_k: Some(l_k),
        l_m: Some(l_m),
        total: l_u + alpha * l_s + beta * l_k + gamma * l_m,
        ..LossBreakdown::default()
    }
}

/// `L'_u + eta L'_s`.
pub fn unsupervised_objective(l_u_prime: f64, l_s_prime: f64, eta: f64) -> LossBreakdown {
    LossBreakdown {
        l_u_prime: Some(l_u_prime),
        l_s_prime: Some(l_s_prime),
        total: l_u_prime + eta * l_s_prime,
        ..LossBreakdown::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    fn rows(tape: &mut Tape, r: &[Vec<f64>]) -> Var {
        tape.param(Tensor::from_rows(r).unwrap())
    }

    #[test]
    fn utterance_loss_identical_vectors_two_sessions() {
        let mut t = Tape::new();
        let v = rows(&mut t, &vec![vec![0.6, 0.8]; 4]);
        let l = utterance_contrastive(&mut t, v, &[0, 0, 1, 1], 0.5, None, &mut rng()).unwrap();
        assert!((t.value(l).item() - 4.0 * 3f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn utterance_loss_single_session_is_zero() {
        let mut t = Tape::new();
        let v = rows(&mut t, &[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]]);
        let l = utterance_contrastive(&mut t, v, &[3, 3, 3], 0.5, None, &mut rng()).unwrap();
        assert!(t.value(l).item().abs() < 1e-12);
    }

    #[test]
    fn utterance_loss_without_positives_is_zero() {
        let mut t = Tape::new();
        let v = rows(&mut t, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let l = utterance_contrastive(&mut t, v, &[0, 1], 0.5, None, &mut rng()).unwrap();
        assert_eq!(t.value(l).item(), 0.0);
    }

    #[test]
    fn temperatures_must_be_positive() {
        let mut t = Tape::new();
        let v = rows(&mut t, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!(utterance_contrastive(&mut t, v, &[0, 1], 0.0, None, &mut rng()).is_err());
        let p = session_prototypes(&mut t, v, &[0, 1]).unwrap();
        assert!(session_contrastive(&mut t, v, &p, &[0, 1], -1.0).is_err());
        let target = EmTarget {
            assignment: vec![0, 0],
            centroids: Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap(),
        };
        assert!(prototypical_em_loss(&mut t, v, &[target], 0.0).is_err());
    }

    #[test]
    fn negative_cap_limits_denominator() {
        // identical vectors: each anchor's term is log(1 + negatives)
        let mut t = Tape::new();
        let v = rows(&mut t, &vec![vec![1.0, 0.0]; 6]);
        let labels = [0, 0, 1, 1, 1, 1];
        let l = utterance_contrastive(&mut t, v, &labels, 0.5, Some(2), &mut rng()).unwrap();
        // every anchor has 1 or 3 positives; with the cap each sees 2 negatives
        assert!((t.value(l).item() - 6.0 * 3f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn prototypes_of_singleton_and_equal_members() {
        let mut t = Tape::new();
        let v = rows(&mut t, &[vec![0.6, 0.8], vec![1.0, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]]);
        let p = session_prototypes(&mut t, v, &[5, 2, 2, 2]).unwrap();
        // label order is ascending: 2 then 5
        assert_eq!(t.value(p.prototypes).to_rows(), vec![vec![1.0, 0.0], vec![0.6, 0.8]]);
    }

    #[test]
    fn antipodal_session_mean_rejected() {
        let mut t = Tape::new();
        let v = rows(&mut t, &[vec![1.0, 0.0], vec![-1.0, 0.0]]);
        assert!(matches!(session_prototypes(&mut t, v, &[0, 0]), Err(Error::Domain { .. })));
    }

    #[test]
    fn session_loss_closed_forms() {
        let mut t = Tape::new();
        let v = rows(&mut t, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let p = session_prototypes(&mut t, v, &[0, 1]).unwrap();
        let l = session_contrastive(&mut t, v, &p, &[0, 1], 1.0).unwrap();
        let expected = 2.0 * (1.0 + (-1.0f64).exp()).ln();
        assert!((t.value(l).item() - expected).abs() < 1e-12);

        let p1 = session_prototypes(&mut t, v, &[0, 0]).unwrap();
        let l1 = session_contrastive(&mut t, v, &p1, &[0, 0], 0.5).unwrap();
        assert!(t.value(l1).item().abs() < 1e-12);
    }

    #[test]
    fn centroid_matching_distances() {
        let mut t = Tape::new();
        let p = t.param(Tensor::zeros(&[1, 3]));
        let c = t.param(Tensor::matrix(1, 3, vec![3.0, 4.0, 0.0]).unwrap());
        let l = centroid_matching(&mut t, p, c, &[(0, 0)]).unwrap();
        assert!((t.value(l).item() - 5.0).abs() < 1e-12);

        let same = centroid_matching(&mut t, c, c, &[(0, 0)]).unwrap();
        assert_eq!(t.value(same).item(), 0.0);
        // gradient at zero distance is defined (zero)
        let g = t.backward(same).unwrap();
        assert!(g.get(&t, c).data().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn centroid_matching_rejects_non_bijection() {
        let mut t = Tape::new();
        let p = t.param(Tensor::zeros(&[2, 2]));
        assert!(centroid_matching(&mut t, p, p, &[(0, 0), (1, 0)]).is_err());
    }

    #[test]
    fn centroid_matching_is_homogeneous() {
        let mut t = Tape::new();
        let p = t.param(Tensor::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5]]).unwrap());
        let c = t.param(Tensor::from_rows(&[vec![0.0, 1.0], vec![2.0, 2.0]]).unwrap());
        let p2 = t.scale(p, 2.0).unwrap();
        let c2 = t.scale(c, 2.0).unwrap();
        let a = centroid_matching(&mut t, p, c, &[(0, 1), (1, 0)]).unwrap();
        let b = centroid_matching(&mut t, p2, c2, &[(0, 1), (1, 0)]).unwrap();
        assert!((2.0 * t.value(a).item() - t.value(b).item()).abs() < 1e-12);
    }

    #[test]
    fn objective_composition() {
        let b = supervised_objective(1.0, 0.5, 0.2, 0.1, 0.4, 0.4, 0.2);
        assert!((b.total - 1.30).abs() < 1e-12);
        assert_eq!(supervised_objective(0.0, 0.0, 0.0, 0.0, 0.4, 0.4, 0.2).total, 0.0);
        assert_eq!(supervised_objective(2.5, 9.0, 9.0, 9.0, 0.0, 0.0, 0.0).total, 2.5);
        assert!((unsupervised_objective(1.0, 0.5, 0.4).total - 1.2).abs() < 1e-12);
        assert_eq!(unsupervised_objective(1.5, 7.0, 0.0).total, 1.5);
        assert_eq!(unsupervised_objective(0.0, 0.0, 0.4).total, 0.0);
        assert_eq!(b.l_u_prime, None);
    }

    #[test]
    fn speaker_loss_requires_two_conversations() {
        let mut t = Tape::new();
        let v = rows(&mut t, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let spk = vec!["a".to_string(), "a".to_string()];
        assert!(speaker_contrastive(&mut t, v, &[0, 0], &spk, 0.5, None, &mut rng()).is_err());
    }

    #[test]
    fn speaker_loss_identical_vectors() {
        // conversation 0: a, a, b ; conversation 1: c, d
        let mut t = Tape::new();
        let v = rows(&mut t, &vec![vec![1.0, 0.0]; 5]);
        let spk: Vec<String> = ["a", "a", "b", "c", "d"].iter().map(|s| s.to_string()).collect();
        let l = speaker_contrastive(&mut t, v, &[0, 0, 0, 1, 1], &spk, 0.5, None, &mut rng()).unwrap();
        // two active anchors, each 1 positive + 2 negatives
        assert!((t.value(l).item() - 2.0 * 3f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn speaker_loss_repels_identical_copies() {
        let mut t = Tape::new();
        let v = rows(&mut t, &[vec![1.0, 0.0], vec![0.8, 0.6], vec![1.0, 0.0], vec![0.8, 0.6]]);
        let spk: Vec<String> = ["a", "a", "a", "a"].iter().map(|s| s.to_string()).collect();
        let l = speaker_contrastive(&mut t, v, &[0, 0, 1, 1], &spk, 0.5, None, &mut rng()).unwrap();
        assert!(t.value(l).item() > 0.0);
    }

    #[test]
    fn em_loss_closed_forms() {
        let mut t = Tape::new();
        let v = rows(&mut t, &[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]);
        let one = EmTarget {
            assignment: vec![0, 0, 0],
            centroids: Tensor::from_rows(&[vec![0.6, 0.8]]).unwrap(),
        };
        let l = prototypical_em_loss(&mut t, v, &[one.clone()], 0.1).unwrap();
        assert!(t.value(l).item().abs() < 1e-12);

        let two = EmTarget {
            assignment: vec![0, 1, 0],
            centroids: Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
        };
        let l2 = prototypical_em_loss(&mut t, v, &[two.clone()], 1.0).unwrap();
        let expected = 3.0 * (1.0 + (-1.0f64).exp()).ln();
        assert!((t.value(l2).item() - expected).abs() < 1e-12);

        let a = prototypical_em_loss(&mut t, v, &[two.clone()], 0.3).unwrap();
        let b = prototypical_em_loss(&mut t, v, &[one.clone()], 0.3).unwrap();
        let both = prototypical_em_loss(&mut t, v, &[two, one], 0.3).unwrap();
        let mean = 0.5 * (t.value(a).item() + t.value(b).item());
        assert!((t.value(both).item() - mean).abs() < 1e-12);
    }

    #[test]
    fn em_loss_leaves_centroids_gradient_free() {
        let mut t = Tape::new();
        let v = rows(&mut t, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let target = EmTarget {
            assignment: vec![0, 1],
            centroids: Tensor::from_rows(&[vec![0.6, 0.8], vec![0.8, -0.6]]).unwrap(),
        };
        let l = prototypical_em_loss(&mut t, v, &[target], 0.1).unwrap();
        let g = t.backward(l).unwrap();
        assert!(g.get(&t, v).data().iter().any(|x| *x != 0.0));
    }
}
