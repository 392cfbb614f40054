//! Connectionist temporal classification: loss, gradient, and decoding.
//!
//! Label 0 is the blank. All lattice math runs in the log domain with
//! log-sum-exp; posteriors come from `alpha + beta - total`, which avoids
//! the division by the frame probability that the textbook recursion asks
//! for. The returned gradient is taken with respect to pre-softmax logits
//! composed with log-softmax, i.e. the well-conditioned
//! `softmax - posterior` form.

use crate::error::{Error, Result};
use crate::tensor::{BackFn, Tape, Tensor, Var};

pub const BLANK: usize = 0;

/// A target label sequence over an alphabet of `alphabet_size` classes
/// including the blank; labels live in `1..alphabet_size`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelSeq {
    labels: Vec<usize>,
    pub alphabet_size: usize,
}

impl LabelSeq {
    pub fn new(labels: Vec<usize>, alphabet_size: usize) -> Result<Self> {
        for &l in &labels {
            if l == BLANK || l >= alphabet_size {
                return Err(Error::LabelRange {
                    label: l,
                    alphabet: alphabet_size,
                });
            }
        }
        Ok(Self {
            labels,
            alphabet_size,
        })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// The blank-augmented sequence y': blanks between, before, and after
/// every label, so its length is `2U + 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AugmentedSeq {
    pub labels: Vec<usize>,
}

pub fn augment_labels(y: &LabelSeq) -> AugmentedSeq {
    let mut labels = Vec::with_capacity(2 * y.len() + 1);
    labels.push(BLANK);
    for &l in y.labels() {
        labels.push(l);
        labels.push(BLANK);
    }
    AugmentedSeq { labels }
}

/// Minimum number of frames that can emit `y`: one per label plus one
/// separating blank per adjacent repeat.
pub fn required_frames(y: &LabelSeq) -> usize {
    let repeats = y.labels().windows(2).filter(|w| w[0] == w[1]).count();
    y.len() + repeats
}

/// Forward/backward lattices over the augmented sequence.
///
/// `log_alpha[t*s_len + s]` includes the emission at time t;
/// `log_beta[t*s_len + s]` covers the suffix strictly after t. Their sum
/// minus the total log-likelihood is the state posterior.
#[derive(Debug, Clone)]
pub struct CtcTables {
    pub log_probs: Tensor,
    pub augmented: AugmentedSeq,
    pub log_alpha: Vec<f64>,
    pub log_beta: Vec<f64>,
    pub frames: usize,
    pub states: usize,
    pub log_like_forward: f64,
    pub log_like_backward: f64,
}

fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn lse3(a: f64, b: f64, c: f64) -> f64 {
    lse2(lse2(a, b), c)
}

fn check_inputs(log_probs: &Tensor, y: &LabelSeq) -> Result<(usize, usize)> {
    if log_probs.ndim() != 2 {
        return Err(Error::Shape(format!(
            "log_probs must be [T, K], got {:?}",
            log_probs.shape()
        )));
    }
    let (t, k) = (log_probs.shape()[0], log_probs.shape()[1]);
    if y.alphabet_size != k {
        return Err(Error::LabelRange {
            label: y.alphabet_size,
            alphabet: k,
        });
    }
    Ok((t, k))
}

/// Run the forward-backward recursions.
pub fn ctc_forward_backward(log_probs: &Tensor, y: &LabelSeq) -> Result<CtcTables> {
    let (t_len, k) = check_inputs(log_probs, y)?;
    let needed = required_frames(y);
    if t_len < needed {
        return Err(Error::TargetTooLong {
            needed,
            got: t_len,
        });
    }
    let aug = augment_labels(y);
    let s_len = aug.labels.len();
    let lp = |t: usize, label: usize| log_probs.data()[t * k + label];
    let ninf = f64::NEG_INFINITY;

    // skip transition into state s: allowed for non-blank states whose
    // label differs from the state two back
    let skip_ok: Vec<bool> = (0..s_len)
        .map(|s| s >= 2 && aug.labels[s] != BLANK && aug.labels[s] != aug.labels[s - 2])
        .collect();

    let mut la = vec![ninf; t_len * s_len];
    la[0] = lp(0, BLANK);
    if s_len > 1 {
        la[1] = lp(0, aug.labels[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let stay = la[(t - 1) * s_len + s];
            let step = if s >= 1 { la[(t - 1) * s_len + s - 1] } else { ninf };
            let skip = if skip_ok[s] { la[(t - 1) * s_len + s - 2] } else { ninf };
            let prev = lse3(stay, step, skip);
            la[t * s_len + s] = if prev == ninf {
                ninf
            } else {
                prev + lp(t, aug.labels[s])
            };
        }
    }
    let log_like_forward = if s_len > 1 {
        lse2(
            la[(t_len - 1) * s_len + s_len - 1],
            la[(t_len - 1) * s_len + s_len - 2],
        )
    } else {
        la[(t_len - 1) * s_len]
    };

    let mut lb = vec![ninf; t_len * s_len];
    lb[(t_len - 1) * s_len + s_len - 1] = 0.0;
    if s_len > 1 {
        lb[(t_len - 1) * s_len + s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let stay = lb[(t + 1) * s_len + s] + lp(t + 1, aug.labels[s]);
            let step = if s + 1 < s_len {
                lb[(t + 1) * s_len + s + 1] + lp(t + 1, aug.labels[s + 1])
            } else {
                ninf
            };
            let skip = if s + 2 < s_len && skip_ok[s + 2] {
                lb[(t + 1) * s_len + s + 2] + lp(t + 1, aug.labels[s + 2])
            } else {
                ninf
            };
            lb[t * s_len + s] = lse3(stay, step, skip);
        }
    }
    let mut log_like_backward = lb[0] + lp(0, BLANK);
    if s_len > 1 {
        log_like_backward = lse2(log_like_backward, lb[1] + lp(0, aug.labels[1]));
    }

    Ok(CtcTables {
        log_probs: log_probs.clone(),
        augmented: aug,
        log_alpha: la,
        log_beta: lb,
        frames: t_len,
        states: s_len,
        log_like_forward,
        log_like_backward,
    })
}

impl CtcTables {
    /// Posterior label occupancy `G[t*K + k]`; each frame's row sums to 1.
    pub fn posterior(&self) -> Vec<f64> {
        let k = self.log_probs.shape()[1];
        let mut g = vec![0.0; self.frames * k];
        for t in 0..self.frames {
            for s in 0..self.states {
                let lg = self.log_alpha[t * self.states + s] + self.log_beta[t * self.states + s]
                    - self.log_like_forward;
                if lg > f64::NEG_INFINITY {
                    g[t * k + self.augmented.labels[s]] += lg.exp();
                }
            }
        }
        g
    }
}

/// CTC loss and its gradient with respect to pre-softmax logits (composed
/// with log-softmax): `exp(log_probs) - posterior`.
pub fn ctc_loss(log_probs: &Tensor, y: &LabelSeq) -> Result<(f64, Tensor)> {
    let tables = ctc_forward_backward(log_probs, y)?;
    debug_assert!(
        (tables.log_like_forward - tables.log_like_backward).abs() <= 1e-9,
        "forward/backward disagree: {} vs {}",
        tables.log_like_forward,
        tables.log_like_backward
    );
    let g = tables.posterior();
    let grad = Tensor::from_fn(log_probs.shape(), |i| log_probs.data()[i].exp() - g[i]);
    Ok((-tables.log_like_forward, grad))
}

/// CTC loss as a tape node over a `[T, K]` log-probability input.
///
/// The node's local gradient is `-posterior`, which chained through the
/// upstream log-softmax yields the same `softmax - posterior` as
/// [`ctc_loss`].
pub fn ctc_loss_op(tape: &mut Tape, log_probs: Var, y: &LabelSeq) -> Result<Var> {
    let tables = ctc_forward_backward(tape.value(log_probs), y)?;
    debug_assert!((tables.log_like_forward - tables.log_like_backward).abs() <= 1e-9);
    let loss = -tables.log_like_forward;
    let posterior = tables.posterior();
    let needs = tape.needs_grad(log_probs);
    let back: BackFn = Box::new(move |ctx, go| {
        if ctx.wants(log_probs) {
            let buf = ctx.buf(log_probs);
            for (b, &p) in buf.iter_mut().zip(&posterior) {
                *b -= go[0] * p;
            }
        }
    });
    Ok(tape.push(Tensor::scalar(loss), needs, Some(back)))
}

/// Exhaustive-path CTC loss: enumerate every path in `{0..K}^T`, keep the
/// ones whose collapse (merge repeats, then drop blanks) equals the
/// target, and sum their probabilities. Desk-scale oracle only.
pub fn brute_force_ctc(log_probs: &Tensor, y: &LabelSeq) -> Result<f64> {
    let (t_len, k) = check_inputs(log_probs, y)?;
    let total_paths = (k as f64).powi(t_len as i32);
    if total_paths > 1e7 {
        return Err(Error::TooLarge(format!(
            "{k}^{t_len} paths exceed the brute-force guard"
        )));
    }
    let lp = log_probs.data();
    let mut sum = 0.0f64;
    let n_paths = (k as u64).pow(t_len as u32);
    let mut path = vec![0usize; t_len];
    for mut code in 0..n_paths {
        for slot in path.iter_mut() {
            *slot = (code % k as u64) as usize;
            code /= k as u64;
        }
        if collapse(&path) == y.labels() {
            let logp: f64 = path
                .iter()
                .enumerate()
                .map(|(t, &l)| lp[t * k + l])
                .sum();
            sum += logp.exp();
        }
    }
    Ok(if sum == 0.0 { f64::INFINITY } else { -sum.ln() })
}

fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &l in path {
        if Some(l) != prev {
            if l != BLANK {
                out.push(l);
            }
            prev = Some(l);
        }
    }
    out
}

/// Best-path decoding: per-frame argmax (lowest index wins ties),
/// collapse repeats, remove blanks.
pub fn greedy_decode(log_probs: &Tensor) -> Result<LabelSeq> {
    if log_probs.ndim() != 2 {
        return Err(Error::Shape(format!(
            "log_probs must be [T, K], got {:?}",
            log_probs.shape()
        )));
    }
    let (t_len, k) = (log_probs.shape()[0], log_probs.shape()[1]);
    let mut path = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let row = &log_probs.data()[t * k..(t + 1) * k];
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        path.push(best);
    }
    LabelSeq::new(collapse(&path), k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn uniform_lp(t: usize, k: usize) -> Tensor {
        Tensor::full(&[t, k], (1.0 / k as f64).ln())
    }

    /// Random normalized log-probability rows.
    fn random_lp(t: usize, k: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let mut data = vec![0.0; t * k];
        for row in 0..t {
            let mut s = 0.0f64;
            let mut probs = vec![0.0f64; k];
            for p in probs.iter_mut() {
                *p = rng.random_range(0.05..1.0);
                s += *p;
            }
            for (i, p) in probs.iter().enumerate() {
                data[row * k + i] = (p / s).ln();
            }
        }
        Tensor::new(vec![t, k], data).unwrap()
    }

    #[test]
    fn augmentation_matches_blank_interleaving() {
        // (h,e,n) with h=1, e=2, n=3 -> (-,h,-,e,-,n,-)
        let y = LabelSeq::new(vec![1, 2, 3], 4).unwrap();
        assert_eq!(augment_labels(&y).labels, vec![0, 1, 0, 2, 0, 3, 0]);

        let empty = LabelSeq::new(vec![], 4).unwrap();
        assert_eq!(augment_labels(&empty).labels, vec![0]);

        let rep = LabelSeq::new(vec![1, 1], 4).unwrap();
        assert_eq!(augment_labels(&rep).labels, vec![0, 1, 0, 1, 0]);
        assert_eq!(required_frames(&rep), 3);
    }

    #[test]
    fn label_seq_rejects_blank_and_out_of_range() {
        assert!(LabelSeq::new(vec![0], 3).is_err());
        assert!(LabelSeq::new(vec![3], 3).is_err());
        assert!(LabelSeq::new(vec![1, 2], 3).is_ok());
    }

    #[test]
    fn single_frame_single_label() {
        // T=1, y=(a), q1(a)=0.7 -> loss = -ln 0.7
        let lp = Tensor::new(vec![1, 2], vec![0.3f64.ln(), 0.7f64.ln()]).unwrap();
        let y = LabelSeq::new(vec![1], 2).unwrap();
        let (loss, _) = ctc_loss(&lp, &y).unwrap();
        assert!((loss - 0.356_674_943_938_732_3).abs() < 1e-12);
        let brute = brute_force_ctc(&lp, &y).unwrap();
        assert!((loss - brute).abs() < 1e-12);
    }

    #[test]
    fn all_blank_path_for_empty_target() {
        // T=2, empty target, uniform over K=3: P = (1/3)^2
        let lp = uniform_lp(2, 3);
        let y = LabelSeq::new(vec![], 3).unwrap();
        let (loss, _) = ctc_loss(&lp, &y).unwrap();
        assert!((loss - 9.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_frames_one_label_hand_enumeration() {
        // paths: (a,a), (a,-), (-,a)
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let lp = random_lp(2, 3, &mut rng);
        let y = LabelSeq::new(vec![1], 3).unwrap();
        let q = |t: usize, l: usize| lp.data()[t * 3 + l].exp();
        let want = -(q(0, 1) * q(1, 1) + q(0, 1) * q(1, 0) + q(0, 0) * q(1, 1)).ln();
        let (loss, _) = ctc_loss(&lp, &y).unwrap();
        assert!((loss - want).abs() < 1e-12);
    }

    #[test]
    fn target_longer_than_frames_errors() {
        let lp = uniform_lp(2, 3);
        let y = LabelSeq::new(vec![1, 2, 1], 3).unwrap();
        assert!(matches!(
            ctc_loss(&lp, &y),
            Err(Error::TargetTooLong { needed: 3, got: 2 })
        ));
        // the brute-force oracle reports the same impossibility as +inf
        let y2 = LabelSeq::new(vec![1, 1], 3).unwrap();
        let lp1 = uniform_lp(1, 3);
        assert_eq!(brute_force_ctc(&lp1, &y2).unwrap(), f64::INFINITY);
    }

    #[test]
    fn matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        for _ in 0..200 {
            let t = rng.random_range(1..=6);
            let k = rng.random_range(2..=4);
            let u = rng.random_range(0..=3.min(t));
            let labels: Vec<usize> = (0..u).map(|_| rng.random_range(1..k)).collect();
            let y = LabelSeq::new(labels, k).unwrap();
            let lp = random_lp(t, k, &mut rng);
            let brute = brute_force_ctc(&lp, &y).unwrap();
            match ctc_loss(&lp, &y) {
                Ok((loss, _)) => {
                    assert!(
                        (loss - brute).abs() <= 1e-9,
                        "T={t} K={k} y={:?}: {loss} vs {brute}",
                        y.labels()
                    );
                }
                Err(Error::TargetTooLong { .. }) => {
                    assert_eq!(brute, f64::INFINITY);
                }
                Err(e) => panic!("unexpected error {e}"),
            }
        }
    }

    #[test]
    fn forward_backward_likelihoods_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let t = rng.random_range(2..=8);
            let k = rng.random_range(2..=5);
            let u = rng.random_range(0..=t.min(4) / 2);
            let labels: Vec<usize> = (0..u).map(|_| rng.random_range(1..k)).collect();
            let y = LabelSeq::new(labels, k).unwrap();
            let lp = random_lp(t, k, &mut rng);
            if let Ok(tables) = ctc_forward_backward(&lp, &y) {
                assert!(
                    (tables.log_like_forward - tables.log_like_backward).abs() <= 1e-9,
                    "{} vs {}",
                    tables.log_like_forward,
                    tables.log_like_backward
                );
            }
        }
    }

    #[test]
    fn posterior_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lp = random_lp(6, 4, &mut rng);
        let y = LabelSeq::new(vec![1, 3, 3], 4).unwrap();
        let tables = ctc_forward_backward(&lp, &y).unwrap();
        let g = tables.posterior();
        for t in 0..6 {
            let s: f64 = g[t * 4..(t + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-9, "frame {t} sums to {s}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences_over_logits() {
        use crate::tensor::{finite_difference_grad, max_rel_err};
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let t_len = 5;
        let k = 4;
        let y = LabelSeq::new(vec![2, 1], k).unwrap();
        let logits = Tensor::uniform(&[t_len, k], -1.0, 1.0, &mut rng);

        let f = |z: &Tensor| -> f64 {
            let mut tape = Tape::new();
            let zv = tape.leaf(z.clone(), false);
            let lp = tape.log_softmax(zv, 1).unwrap();
            ctc_loss(tape.value(lp), &y).unwrap().0
        };

        // analytic gradient via the spec form: softmax - posterior
        let mut tape = Tape::new();
        let zv = tape.leaf(logits.clone(), true);
        let lp = tape.log_softmax(zv, 1).unwrap();
        let (_, grad) = ctc_loss(tape.value(lp), &y).unwrap();

        let fd = finite_difference_grad(&mut |z| f(z), &logits, 1e-5);
        assert!(max_rel_err(grad.data(), fd.data()) < 1e-6);

        // and via the tape node, which must agree with the direct form
        let loss_var = ctc_loss_op(&mut tape, lp, &y).unwrap();
        let grads = tape.backward(loss_var).unwrap();
        assert!(max_rel_err(grads.get(zv).unwrap(), grad.data()) < 1e-12);
    }

    #[test]
    fn raising_consistent_probability_never_hurts_single_path() {
        // T == required frames: exactly one valid path; pushing mass
        // toward it can only lower the loss.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let y = LabelSeq::new(vec![1, 2], 3).unwrap();
            let lp = random_lp(2, 3, &mut rng);
            let (base, _) = ctc_loss(&lp, &y).unwrap();
            // boost the target label at frame 0 and renormalize
            let mut probs: Vec<f64> = lp.data().iter().map(|v| v.exp()).collect();
            probs[1] += 0.2;
            let s: f64 = probs[..3].iter().sum();
            let mut data = lp.data().to_vec();
            for i in 0..3 {
                data[i] = (probs[i] / s).ln();
            }
            let boosted = Tensor::new(vec![2, 3], data).unwrap();
            let (after, _) = ctc_loss(&boosted, &y).unwrap();
            assert!(after <= base + 1e-12);
        }
    }

    #[test]
    fn long_sequences_stay_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let lp = random_lp(500, 100, &mut rng);
        let labels: Vec<usize> = (0..40).map(|_| rng.random_range(1..100)).collect();
        let y = LabelSeq::new(labels, 100).unwrap();
        let (loss, grad) = ctc_loss(&lp, &y).unwrap();
        assert!(loss.is_finite());
        assert!(grad.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn greedy_decode_collapse_rules() {
        // frames argmax: (a, a, -, b) -> (a, b)
        let k = 3;
        let mk = |rows: &[usize]| {
            Tensor::from_fn(&[rows.len(), k], |i| {
                if i % k == rows[i / k] {
                    0.0
                } else {
                    -10.0
                }
            })
        };
        let d = greedy_decode(&mk(&[1, 1, 0, 2])).unwrap();
        assert_eq!(d.labels(), &[1, 2]);
        let blanks = greedy_decode(&mk(&[0, 0, 0])).unwrap();
        assert!(blanks.is_empty());
        let sep = greedy_decode(&mk(&[1, 0, 1])).unwrap();
        assert_eq!(sep.labels(), &[1, 1]);
        // ties go to the lowest index (all-equal rows decode to blank)
        let tie = greedy_decode(&Tensor::zeros(&[3, 3])).unwrap();
        assert!(tie.is_empty());
    }
}
