//! Loss terms: factual outcome loss, the between-treatment and cross-domain
//! adversarial values, the softmax/EMA domain weighting scheme, and the
//! gradient penalty that keeps critics near 1-Lipschitz.

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::networks::{Arm, Mlp, MlpVars, ModelBundle};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;
use std::ops::Range;

/// One contiguous row block of a batch: a (domain, arm) stratum, or the
/// unlabeled target block (`arm == None`).
#[derive(Clone, Debug)]
pub struct BatchGroup {
    pub domain: usize,
    pub arm: Option<Arm>,
    pub rows: Range<usize>,
    /// Observed outcomes, one per row; empty for unlabeled groups.
    pub y: Vec<f64>,
}

/// A minibatch: standardized features plus the strata layout. Rows of one
/// domain are contiguous so group and domain means are row slices.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor,
    pub groups: Vec<BatchGroup>,
}

impl Batch {
    pub fn new(x: Tensor, groups: Vec<BatchGroup>) -> Self {
        let mut cursor = 0;
        for g in &groups {
            assert_eq!(g.rows.start, cursor, "batch groups must tile the rows");
            assert!(g.rows.end > g.rows.start, "empty batch group");
            if g.arm.is_some() {
                assert_eq!(g.y.len(), g.rows.len(), "labeled group without outcomes");
            } else {
                assert!(g.y.is_empty(), "unlabeled group with outcomes");
            }
            cursor = g.rows.end;
        }
        assert_eq!(cursor, x.rows(), "groups do not cover the batch");
        Batch { x, groups }
    }

    pub fn rows(&self) -> usize {
        self.x.rows()
    }

    /// Sorted domains that carry labeled (source) groups.
    pub fn source_domains(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self
            .groups
            .iter()
            .filter(|g| g.arm.is_some())
            .map(|g| g.domain)
            .collect();
        set.into_iter().collect()
    }

    /// Sorted domains present in the batch, target included.
    pub fn all_domains(&self) -> Vec<usize> {
        let set: BTreeSet<usize> = self.groups.iter().map(|g| g.domain).collect();
        set.into_iter().collect()
    }

    pub fn group(&self, domain: usize, arm: Arm) -> Option<&BatchGroup> {
        self.groups
            .iter()
            .find(|g| g.domain == domain && g.arm == Some(arm))
    }

    /// Contiguous row range covering every group of `domain`.
    pub fn domain_rows(&self, domain: usize) -> Option<Range<usize>> {
        let mut lo = usize::MAX;
        let mut hi = 0;
        let mut len = 0;
        for g in self.groups.iter().filter(|g| g.domain == domain) {
            lo = lo.min(g.rows.start);
            hi = hi.max(g.rows.end);
            len += g.rows.len();
        }
        if len == 0 {
            return None;
        }
        assert_eq!(hi - lo, len, "domain {domain} rows are not contiguous");
        Some(lo..hi)
    }
}

/// Per-domain EMA distance vectors and the softmax weights derived from them.
/// Both are stored as S x S row-major matrices whose diagonals are unused.
#[derive(Clone, Debug)]
pub struct DomainWeightState {
    s: usize,
    l: Vec<f64>,
    w: Vec<f64>,
    pub ema: f64,
}

impl DomainWeightState {
    pub fn new(s: usize) -> Self {
        assert!(s >= 2, "need at least two domains");
        let mut w = vec![0.0; s * s];
        let uniform = 1.0 / (s - 1) as f64;
        for r in 0..s {
            for c in 0..s {
                if r != c {
                    w[r * s + c] = uniform;
                }
            }
        }
        DomainWeightState {
            s,
            l: vec![0.0; s * s],
            w,
            ema: 0.9,
        }
    }

    pub fn domain_count(&self) -> usize {
        self.s
    }

    pub fn distance(&self, s: usize, i: usize) -> f64 {
        self.l[s * self.s + i]
    }

    pub fn weight(&self, s: usize, i: usize) -> f64 {
        self.w[s * self.s + i]
    }

    pub fn weights_matrix(&self) -> &[f64] {
        &self.w
    }

    /// Blends current-batch distances into the EMA and refreshes the softmax
    /// weights. `l_current` is S x S row-major; diagonals are ignored.
    ///
    /// The blend is written `l + (1-ema)*(l_c - l)` so that a fixed point
    /// (`l_c == l`) reproduces `l` exactly.
    pub fn update(&mut self, l_current: &[f64]) {
        assert_eq!(l_current.len(), self.s * self.s, "distance matrix size");
        let keep = 1.0 - self.ema;
        for r in 0..self.s {
            for c in 0..self.s {
                if r == c {
                    continue;
                }
                let idx = r * self.s + c;
                self.l[idx] += keep * (l_current[idx] - self.l[idx]);
            }
        }
        self.refresh_weights();
    }

    fn refresh_weights(&mut self) {
        for r in 0..self.s {
            // softmax(-l_r) over off-diagonal entries, max-shifted.
            let mut best = f64::NEG_INFINITY;
            for c in 0..self.s {
                if c != r {
                    best = best.max(-self.l[r * self.s + c]);
                }
            }
            let mut total = 0.0;
            for c in 0..self.s {
                if c != r {
                    total += (-self.l[r * self.s + c] - best).exp();
                }
            }
            for c in 0..self.s {
                let idx = r * self.s + c;
                self.w[idx] = if c == r {
                    0.0
                } else {
                    (-self.l[idx] - best).exp() / total
                };
            }
        }
    }

    /// Restores EMA distances directly (checkpoint load) and refreshes the
    /// weights from them.
    pub fn set_distances(&mut self, l: &[f64]) {
        assert_eq!(l.len(), self.s * self.s, "distance matrix size");
        self.l.copy_from_slice(l);
        for r in 0..self.s {
            self.l[r * self.s + r] = 0.0;
        }
        self.refresh_weights();
    }

    pub fn distances_matrix(&self) -> &[f64] {
        &self.l
    }

    /// Rows must lie on the probability simplex.
    pub fn validate(&self, tol: f64) -> Result<()> {
        for r in 0..self.s {
            let mut sum = 0.0;
            for c in 0..self.s {
                let w = self.w[r * self.s + c];
                if w < 0.0 {
                    return Err(Error::Verify(format!("negative weight at ({r},{c})")));
                }
                sum += w;
            }
            if (sum - 1.0).abs() > tol {
                return Err(Error::Verify(format!(
                    "weight row {r} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(())
    }
}

/// How the between-treatment critic is wired.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BtMode {
    /// One critic head per source domain, balancing arms within each domain.
    PerDomain,
    /// A single head balancing the pooled source arms (the naive variant).
    Global,
}

/// Component values of one full-loss evaluation.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossBreakdown {
    pub outcome: f64,
    pub l_bt: f64,
    pub l_cd: f64,
    pub gp: f64,
    pub alpha: f64,
    pub beta: f64,
    pub total: f64,
}

fn group_mean_column(
    tape: &mut Tape,
    matrix: NodeId,
    col: usize,
    rows: &Range<usize>,
) -> NodeId {
    let c = tape.slice_cols(matrix, col, col + 1);
    let r = tape.slice_rows(c, rows.start, rows.end);
    tape.mean(r)
}

/// Factual outcome loss: for each source domain, the mean squared error of
/// the arm-matched head on each treatment group, summed over domains and
/// groups.
pub fn outcome_loss(
    tape: &mut Tape,
    h0: &Mlp,
    h0v: &MlpVars,
    h1: &Mlp,
    h1v: &MlpVars,
    phi: NodeId,
    batch: &Batch,
) -> Result<NodeId> {
    let mut total: Option<NodeId> = None;
    for domain in batch.source_domains() {
        for arm in [Arm::Control, Arm::Treated] {
            let g = batch.group(domain, arm).ok_or_else(|| {
                Error::Data(format!(
                    "domain {domain} is missing its {arm:?} group; treatment probability \
                     must be bounded away from zero in every domain"
                ))
            })?;
            let phi_g = tape.slice_rows(phi, g.rows.start, g.rows.end);
            let pred = match arm {
                Arm::Control => h0.forward_tape(tape, h0v, phi_g),
                Arm::Treated => h1.forward_tape(tape, h1v, phi_g),
            };
            let y = tape.constant(Tensor::matrix(g.rows.len(), 1, g.y.clone()));
            let resid = tape.sub(pred, y);
            let sq = tape.square(resid);
            let mse = tape.mean(sq);
            total = Some(match total {
                Some(t) => tape.add(t, mse),
                None => mse,
            });
        }
    }
    total.ok_or_else(|| Error::Data("batch has no labeled source groups".into()))
}

/// Between-treatment adversarial value: for each source domain (or the pool),
/// mean critic output over the control group minus the treatment group.
/// Critics ascend on this value; the embedder descends on it.
pub fn between_treatment_value(
    tape: &mut Tape,
    critic: &Mlp,
    cv: &MlpVars,
    phi: NodeId,
    batch: &Batch,
    mode: BtMode,
) -> Result<NodeId> {
    let sources = batch.source_domains();
    if sources.is_empty() {
        return Err(Error::Data("batch has no labeled source groups".into()));
    }
    let missing_arm = |domain: usize| {
        Error::Data(format!(
            "domain {domain} is missing a treatment group in this batch"
        ))
    };
    // The critic only ever sees source rows, which occupy a prefix of the batch.
    let src_end = sources
        .iter()
        .map(|&d| batch.domain_rows(d).unwrap().end)
        .max()
        .unwrap();
    for g in &batch.groups {
        assert!(
            g.arm.is_some() || g.rows.start >= src_end,
            "unlabeled rows must follow all source rows"
        );
    }
    let phi_src = tape.slice_rows(phi, 0, src_end);
    let out = critic.forward_tape(tape, cv, phi_src);

    match mode {
        BtMode::PerDomain => {
            assert_eq!(
                critic.spec.output_dim,
                sources.len(),
                "per-domain critic needs one head per source domain"
            );
            let mut total: Option<NodeId> = None;
            for (head, &domain) in sources.iter().enumerate() {
                let ctrl = batch.group(domain, Arm::Control).ok_or_else(|| missing_arm(domain))?;
                let trt = batch.group(domain, Arm::Treated).ok_or_else(|| missing_arm(domain))?;
                let m0 = group_mean_column(tape, out, head, &ctrl.rows);
                let m1 = group_mean_column(tape, out, head, &trt.rows);
                let term = tape.sub(m0, m1);
                total = Some(match total {
                    Some(t) => tape.add(t, term),
                    None => term,
                });
            }
            Ok(total.unwrap())
        }
        BtMode::Global => {
            let col = tape.slice_cols(out, 0, 1);
            let mut ctrl_parts = Vec::new();
            let mut trt_parts = Vec::new();
            for &domain in &sources {
                let ctrl = batch.group(domain, Arm::Control).ok_or_else(|| missing_arm(domain))?;
                let trt = batch.group(domain, Arm::Treated).ok_or_else(|| missing_arm(domain))?;
                ctrl_parts.push(tape.slice_rows(col, ctrl.rows.start, ctrl.rows.end));
                trt_parts.push(tape.slice_rows(col, trt.rows.start, trt.rows.end));
            }
            let ctrl_all = tape.concat(&ctrl_parts);
            let trt_all = tape.concat(&trt_parts);
            let m0 = tape.mean(ctrl_all);
            let m1 = tape.mean(trt_all);
            Ok(tape.sub(m0, m1))
        }
    }
}

/// Numeric S x S matrix of current-batch distances: entry (s, i) is the mean
/// of critic head s over domain s minus its mean over domain i.
pub fn current_distances(bundle: &ModelBundle, batch: &Batch) -> Result<Vec<f64>> {
    let domains = batch.all_domains();
    let s_count = bundle.config.domains;
    if domains.len() != s_count {
        return Err(Error::Data(format!(
            "weight update needs all {s_count} domains in the batch, found {}",
            domains.len()
        )));
    }
    let phi = bundle.embed(&batch.x);
    let out = bundle.critic_cd.forward(&phi);
    let heads = out.cols();
    let mut means = vec![0.0; s_count * heads];
    for (pos, &domain) in domains.iter().enumerate() {
        let rows = batch.domain_rows(domain).unwrap();
        let n = rows.len() as f64;
        for r in rows {
            for h in 0..heads {
                means[pos * heads + h] += out.at(r, h);
            }
        }
        for h in 0..heads {
            means[pos * heads + h] /= n;
        }
    }
    let mut l = vec![0.0; s_count * s_count];
    for s in 0..s_count {
        for i in 0..s_count {
            if s != i {
                l[s * s_count + i] = means[s * heads + s] - means[i * heads + s];
            }
        }
    }
    Ok(l)
}

/// Refreshes the EMA distances and softmax weights from the current batch.
pub fn update_domain_weights(
    state: &mut DomainWeightState,
    bundle: &ModelBundle,
    batch: &Batch,
) -> Result<()> {
    let l = current_distances(bundle, batch)?;
    state.update(&l);
    Ok(())
}

/// Cross-domain adversarial value per the learned weights: for every domain
/// s, mean of head s over its own rows minus the weighted means over the
/// other domains' rows. Sums over all domains, target included.
pub fn cross_domain_value(
    tape: &mut Tape,
    critic: &Mlp,
    cv: &MlpVars,
    phi: NodeId,
    batch: &Batch,
    state: &DomainWeightState,
) -> Result<NodeId> {
    let domains = batch.all_domains();
    if domains.len() != state.domain_count() {
        return Err(Error::Data(format!(
            "cross-domain loss needs all {} domains in the batch, found {}",
            state.domain_count(),
            domains.len()
        )));
    }
    state.validate(1e-6)?;
    assert_eq!(
        critic.spec.output_dim,
        domains.len(),
        "cross-domain critic needs one head per domain"
    );
    let out = critic.forward_tape(tape, cv, phi);
    // Per-(domain, head) means, reused across terms.
    let mut means = vec![None; domains.len() * domains.len()];
    for (pos, &domain) in domains.iter().enumerate() {
        let rows = batch.domain_rows(domain).unwrap();
        for head in 0..domains.len() {
            means[pos * domains.len() + head] =
                Some(group_mean_column(tape, out, head, &rows));
        }
    }
    let mean_of = |pos: usize, head: usize| means[pos * domains.len() + head].unwrap();
    let mut total: Option<NodeId> = None;
    for s in 0..domains.len() {
        let own = mean_of(s, s);
        let mut weighted: Option<NodeId> = None;
        for i in 0..domains.len() {
            if i == s {
                continue;
            }
            let scaled = {
                let m = mean_of(i, s);
                tape.scale(m, state.weight(s, i))
            };
            weighted = Some(match weighted {
                Some(w) => tape.add(w, scaled),
                None => scaled,
            });
        }
        let term = tape.sub(own, weighted.unwrap());
        total = Some(match total {
            Some(t) => tape.add(t, term),
            None => term,
        });
    }
    Ok(total.unwrap())
}

/// Random interpolation between paired rows: `u*a + (1-u)*b` with a fresh
/// `u ~ U(0,1)` per row. Rows are paired by index.
pub fn interpolate_rows(a: &Tensor, b: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "interpolation endpoints must align");
    let (n, d) = (a.rows(), a.cols());
    let mut data = Vec::with_capacity(n * d);
    for i in 0..n {
        let u: f64 = rng.random();
        for j in 0..d {
            data.push(u * a.at(i, j) + (1.0 - u) * b.at(i, j));
        }
    }
    Tensor::matrix(n, d, data)
}

/// Gradient penalty over one or more critic heads. Each block pairs a head
/// index with its interpolated points; the result is the sum over blocks of
/// the mean of `(|d head / d z|_2 - 1)^2`. Stays differentiable with respect
/// to the critic parameters.
pub fn gradient_penalty(
    tape: &mut Tape,
    critic: &Mlp,
    cv: &MlpVars,
    blocks: &[(usize, Tensor)],
) -> Result<NodeId> {
    assert!(!blocks.is_empty(), "gradient penalty needs at least one block");
    let tensors: Vec<&Tensor> = blocks.iter().map(|(_, t)| t).collect();
    let z = tape.constant(Tensor::concat_rows(&tensors));
    let out = critic.forward_tape(tape, cv, z);
    let mut parts = Vec::with_capacity(blocks.len());
    let mut ranges = Vec::with_capacity(blocks.len());
    let mut row = 0;
    for (head, points) in blocks {
        let n = points.rows();
        let col = tape.slice_cols(out, *head, head + 1);
        parts.push(tape.slice_rows(col, row, row + n));
        ranges.push(row..row + n);
        row += n;
    }
    let per_row = if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat(&parts)
    };
    let grads = tape.input_gradient(per_row, z)?;
    let sq = tape.square(grads);
    let norm_sq = tape.row_sum(sq);
    // Tiny offset keeps sqrt differentiable at an exactly-zero gradient.
    let norm_sq = tape.add_scalar(norm_sq, 1e-16);
    let norm = tape.sqrt(norm_sq);
    let ones = tape.constant(Tensor::matrix(row, 1, vec![1.0; row]));
    let excess = tape.sub(norm, ones);
    let pen = tape.square(excess);
    let mut total: Option<NodeId> = None;
    for r in &ranges {
        let block = tape.slice_rows(pen, r.start, r.end);
        let m = tape.mean(block);
        total = Some(match total {
            Some(t) => tape.add(t, m),
            None => m,
        });
    }
    Ok(total.unwrap())
}

/// Which loss terms a training variant activates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VariantPlan {
    pub bt: Option<BtMode>,
    pub cd: bool,
}

/// Inserted tape variables for a full bundle.
pub struct BundleVars {
    pub embedder: MlpVars,
    pub head0: MlpVars,
    pub head1: MlpVars,
    pub critic_bt: MlpVars,
    pub critic_cd: MlpVars,
}

/// Which parameter group is trainable on this tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    Representation,
    Critics,
    Nothing,
}

impl ModelBundle {
    pub fn on_tape(&self, tape: &mut Tape, trainable: Trainable) -> BundleVars {
        let repr = trainable == Trainable::Representation;
        let critics = trainable == Trainable::Critics;
        BundleVars {
            embedder: self.embedder.insert(tape, repr),
            head0: self.head0.insert(tape, repr),
            head1: self.head1.insert(tape, repr),
            critic_bt: self.critic_bt.insert(tape, critics),
            critic_cd: self.critic_cd.insert(tape, critics),
        }
    }
}

/// Full objective for the representation side: outcome + alpha*BT + beta*CD
/// with the critics held fixed. Returns the scalar node and the component
/// values (gradient penalty is a critic-side quantity and reported as 0).
#[allow(clippy::too_many_arguments)]
pub fn full_loss(
    tape: &mut Tape,
    bundle: &ModelBundle,
    vars: &BundleVars,
    batch: &Batch,
    state: &DomainWeightState,
    plan: VariantPlan,
    alpha: f64,
    beta: f64,
) -> Result<(NodeId, LossBreakdown)> {
    assert!(alpha >= 0.0 && beta >= 0.0, "alpha and beta must be nonnegative");
    let x = tape.constant(batch.x.clone());
    let phi = bundle.embedder.forward_tape(tape, &vars.embedder, x);
    let outcome = outcome_loss(
        tape,
        &bundle.head0,
        &vars.head0,
        &bundle.head1,
        &vars.head1,
        phi,
        batch,
    )?;
    let mut breakdown = LossBreakdown {
        outcome: tape.value(outcome).item(),
        alpha,
        beta,
        ..Default::default()
    };
    let mut total = outcome;
    if let Some(mode) = plan.bt {
        let bt = between_treatment_value(
            tape,
            &bundle.critic_bt,
            &vars.critic_bt,
            phi,
            batch,
            mode,
        )?;
        breakdown.l_bt = tape.value(bt).item();
        let scaled = tape.scale(bt, alpha);
        total = tape.add(total, scaled);
    }
    if plan.cd {
        let cd = cross_domain_value(
            tape,
            &bundle.critic_cd,
            &vars.critic_cd,
            phi,
            batch,
            state,
        )?;
        breakdown.l_cd = tape.value(cd).item();
        let scaled = tape.scale(cd, beta);
        total = tape.add(total, scaled);
    }
    breakdown.total = tape.value(total).item();
    Ok((total, breakdown))
}
