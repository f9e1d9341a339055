use super::InfoError;

const SUM_TOL: f64 = 1e-12;

fn xlogx(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

fn check_probs(probs: &[f64], what: &str) -> Result<(), InfoError> {
    if probs.is_empty() {
        return Err(InfoError::Invalid(format!("{what}: empty table")));
    }
    if let Some(i) = probs.iter().position(|p| !p.is_finite() || *p < 0.0) {
        return Err(InfoError::Invalid(format!("{what}: entry {i} = {}", probs[i])));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > SUM_TOL {
        return Err(InfoError::NotNormalized { what: what.to_string(), total });
    }
    Ok(())
}

/// Probability vector over a finite alphabet.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDistribution {
    probs: Vec<f64>,
}

impl DiscreteDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self, InfoError> {
        check_probs(&probs, "distribution")?;
        Ok(Self { probs })
    }

    /// Normalises non-negative weights.
    pub fn from_weights(weights: &[f64]) -> Result<Self, InfoError> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(InfoError::Invalid("weights sum to zero".into()));
        }
        Self::new(weights.iter().map(|w| w / total).collect())
    }

    pub fn uniform(k: usize) -> Self {
        Self { probs: vec![1.0 / k as f64; k] }
    }

    pub fn delta(k: usize, at: usize) -> Self {
        let mut probs = vec![0.0; k];
        probs[at] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Row-stochastic matrix `p(out | in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteChannel {
    rows: Vec<Vec<f64>>,
}

impl DiscreteChannel {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self, InfoError> {
        let width = rows.first().map(Vec::len).unwrap_or(0);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != width {
                return Err(InfoError::Dimension(format!("channel row {i} has {} entries, expected {width}", r.len())));
            }
            check_probs(r, &format!("channel row {i}"))?;
        }
        if rows.is_empty() {
            return Err(InfoError::Invalid("channel without rows".into()));
        }
        Ok(Self { rows })
    }

    pub fn identity(k: usize) -> Self {
        Self { rows: (0..k).map(|i| DiscreteDistribution::delta(k, i).probs).collect() }
    }

    /// Every input maps to the same output law.
    pub fn constant(inputs: usize, output: &DiscreteDistribution) -> Self {
        Self { rows: vec![output.probs.clone(); inputs] }
    }

    pub fn inputs(&self) -> usize {
        self.rows.len()
    }

    pub fn outputs(&self) -> usize {
        self.rows[0].len()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    /// Joint over axes `("in", "out")` induced by an input prior.
    pub fn joint(&self, prior: &DiscreteDistribution) -> Result<DiscreteJoint, InfoError> {
        if prior.len() != self.inputs() {
            return Err(InfoError::Dimension(format!("prior over {} for channel with {} inputs", prior.len(), self.inputs())));
        }
        let mut table = Vec::with_capacity(self.inputs() * self.outputs());
        for (p, row) in prior.probs.iter().zip(&self.rows) {
            table.extend(row.iter().map(|q| p * q));
        }
        DiscreteJoint::new(vec!["in".into(), "out".into()], vec![self.inputs(), self.outputs()], table)
    }

    /// Output marginal under `prior`.
    pub fn push_forward(&self, prior: &DiscreteDistribution) -> Result<DiscreteDistribution, InfoError> {
        if prior.len() != self.inputs() {
            return Err(InfoError::Dimension(format!("prior over {} for channel with {} inputs", prior.len(), self.inputs())));
        }
        let mut out = vec![0.0; self.outputs()];
        for (p, row) in prior.probs.iter().zip(&self.rows) {
            for (o, q) in out.iter_mut().zip(row) {
                *o += p * q;
            }
        }
        Ok(DiscreteDistribution { probs: out })
    }
}

/// Probability table over named finite axes, row-major in axis order.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJoint {
    axes: Vec<String>,
    dims: Vec<usize>,
    probs: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(axes: Vec<String>, dims: Vec<usize>, probs: Vec<f64>) -> Result<Self, InfoError> {
        if axes.len() != dims.len() || axes.is_empty() {
            return Err(InfoError::Dimension(format!("{} axis names for {} dims", axes.len(), dims.len())));
        }
        for (i, a) in axes.iter().enumerate() {
            if axes[..i].contains(a) {
                return Err(InfoError::Invalid(format!("duplicate axis {a}")));
            }
        }
        let len: usize = dims.iter().product();
        if len != probs.len() {
            return Err(InfoError::Dimension(format!("dims {dims:?} need {len} entries, got {}", probs.len())));
        }
        check_probs(&probs, "joint")?;
        Ok(Self { axes, dims, probs })
    }

    /// Product of independent marginals.
    pub fn product(axes: &[&str], marginals: &[DiscreteDistribution]) -> Result<Self, InfoError> {
        let dims: Vec<usize> = marginals.iter().map(|m| m.len()).collect();
        let mut probs = vec![1.0];
        for m in marginals {
            probs = probs.iter().flat_map(|&p| m.probs.iter().map(move |&q| p * q)).collect();
        }
        Self::new(axes.iter().map(|s| s.to_string()).collect(), dims, probs)
    }

    pub fn axes(&self) -> &[String] {
        &self.axes
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    fn axis_index(&self, name: &str) -> Result<usize, InfoError> {
        self.axes
            .iter()
            .position(|a| a == name)
            .ok_or_else(|| InfoError::UnknownAxis(name.to_string()))
    }

    /// Marginal over the listed axes, in the listed order.
    pub fn marginal(&self, keep: &[&str]) -> Result<DiscreteJoint, InfoError> {
        let idx: Vec<usize> = keep.iter().map(|a| self.axis_index(a)).collect::<Result<_, _>>()?;
        for (i, a) in idx.iter().enumerate() {
            if idx[..i].contains(a) {
                return Err(InfoError::Invalid(format!("axis {} listed twice", self.axes[*a])));
            }
        }
        let dims: Vec<usize> = idx.iter().map(|&i| self.dims[i]).collect();
        let mut out = vec![0.0; dims.iter().product::<usize>().max(1)];
        let mut coord = vec![0usize; self.dims.len()];
        for &p in &self.probs {
            let mut flat = 0;
            for &i in &idx {
                flat = flat * self.dims[i] + coord[i];
            }
            out[flat] += p;
            for d in (0..coord.len()).rev() {
                coord[d] += 1;
                if coord[d] < self.dims[d] {
                    break;
                }
                coord[d] = 0;
            }
        }
        if idx.is_empty() {
            return Ok(DiscreteJoint { axes: vec![], dims: vec![], probs: vec![1.0] });
        }
        Ok(DiscreteJoint { axes: keep.iter().map(|s| s.to_string()).collect(), dims, probs: out })
    }

    pub fn marginal_distribution(&self, axis: &str) -> Result<DiscreteDistribution, InfoError> {
        Ok(DiscreteDistribution { probs: self.marginal(&[axis])?.probs })
    }

    /// Joint entropy of a set of axes (the empty set has entropy zero).
    pub fn entropy_of(&self, axes: &[&str]) -> Result<f64, InfoError> {
        if axes.is_empty() {
            return Ok(0.0);
        }
        Ok(-self.marginal(axes)?.probs.iter().map(|&p| xlogx(p)).sum::<f64>())
    }

    /// `H(target | given)`.
    pub fn conditional_entropy(&self, target: &[&str], given: &[&str]) -> Result<f64, InfoError> {
        let both: Vec<&str> = target.iter().chain(given).copied().collect();
        Ok(self.entropy_of(&both)? - self.entropy_of(given)?)
    }
}

pub fn entropy(p: &DiscreteDistribution) -> f64 {
    -p.probs.iter().map(|&x| xlogx(x)).sum::<f64>()
}

/// Cross-entropy `-sum p log q`; infinite when `q` misses mass of `p`.
pub fn cross_entropy_discrete(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<f64, InfoError> {
    if p.len() != q.len() {
        return Err(InfoError::Dimension(format!("alphabets {} vs {}", p.len(), q.len())));
    }
    let mut h = 0.0;
    for (&a, &b) in p.probs.iter().zip(&q.probs) {
        if a > 0.0 {
            if b <= 0.0 {
                return Ok(f64::INFINITY);
            }
            h -= a * b.ln();
        }
    }
    Ok(h)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Divergence {
    pub nats: f64,
    /// False when `p` puts mass where `q` has none; `nats` is then infinite.
    pub absolutely_continuous: bool,
}

pub fn kl_discrete(p: &DiscreteDistribution, q: &DiscreteDistribution) -> Result<Divergence, InfoError> {
    if p.len() != q.len() {
        return Err(InfoError::Dimension(format!("alphabets {} vs {}", p.len(), q.len())));
    }
    Ok(kl_slices(&p.probs, &q.probs))
}

pub(crate) fn kl_slices(p: &[f64], q: &[f64]) -> Divergence {
    let mut kl = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            if b <= 0.0 {
                return Divergence { nats: f64::INFINITY, absolutely_continuous: false };
            }
            kl += a * (a / b).ln();
        }
    }
    Divergence { nats: kl.max(0.0), absolutely_continuous: true }
}

/// `I(A; B | cond)` from entropies of marginals.
pub fn mutual_information(joint: &DiscreteJoint, a: &[&str], b: &[&str], cond: &[&str]) -> Result<f64, InfoError> {
    let mut seen: Vec<&str> = Vec::new();
    for &ax in a.iter().chain(b).chain(cond) {
        if seen.contains(&ax) {
            return Err(InfoError::Invalid(format!("axis {ax} appears in more than one argument")));
        }
        seen.push(ax);
    }
    if a.is_empty() || b.is_empty() {
        return Err(InfoError::Invalid("mutual information needs two non-empty axis sets".into()));
    }
    let ac: Vec<&str> = a.iter().chain(cond).copied().collect();
    let bc: Vec<&str> = b.iter().chain(cond).copied().collect();
    let abc: Vec<&str> = a.iter().chain(b).chain(cond).copied().collect();
    let mi = joint.entropy_of(&ac)? + joint.entropy_of(&bc)? - joint.entropy_of(&abc)? - joint.entropy_of(cond)?;
    Ok(mi)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityCheck {
    /// `I(x; y)` from the induced joint.
    pub lhs: f64,
    /// `E_y KL(p(x|y) || p(x))`.
    pub rhs: f64,
}

pub fn mi_identity_check(prior: &DiscreteDistribution, channel: &DiscreteChannel) -> Result<IdentityCheck, InfoError> {
    let joint = channel.joint(prior)?;
    let lhs = mutual_information(&joint, &["in"], &["out"], &[])?;
    let marginal = channel.push_forward(prior)?;
    let rhs = prior
        .probs
        .iter()
        .zip(channel.rows())
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, row)| p * kl_slices(row, &marginal.probs).nats)
        .sum();
    Ok(IdentityCheck { lhs, rhs })
}

/// `KL(joint || product of its one-axis marginals)`.
pub fn total_correlation_discrete(joint: &DiscreteJoint) -> Result<f64, InfoError> {
    if joint.axes.len() < 2 {
        return Err(InfoError::Invalid("total correlation needs at least two axes".into()));
    }
    let marginals: Vec<DiscreteDistribution> = joint
        .axes
        .iter()
        .map(|a| joint.marginal_distribution(a))
        .collect::<Result<_, _>>()?;
    let names: Vec<&str> = joint.axes.iter().map(String::as_str).collect();
    let product = DiscreteJoint::product(&names, &marginals)?;
    Ok(kl_slices(&joint.probs, &product.probs).nats)
}

/// Channel `y -> x2` obtained by feeding the output of `first` into `second`.
pub fn compose_channels(first: &DiscreteChannel, second: &DiscreteChannel) -> Result<DiscreteChannel, InfoError> {
    if first.outputs() != second.inputs() {
        return Err(InfoError::Dimension(format!("{} outputs feeding {} inputs", first.outputs(), second.inputs())));
    }
    let rows = first
        .rows
        .iter()
        .map(|r| {
            let mut out = vec![0.0; second.outputs()];
            for (p, row2) in r.iter().zip(&second.rows) {
                for (o, q) in out.iter_mut().zip(row2) {
                    *o += p * q;
                }
            }
            out
        })
        .collect();
    Ok(DiscreteChannel { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, simplex};
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn random_channel(rng: &mut crate::rng::SimRng, n_in: usize, n_out: usize) -> DiscreteChannel {
        DiscreteChannel::new((0..n_in).map(|_| simplex(rng, n_out)).collect()).unwrap()
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&DiscreteDistribution::delta(3, 1)), 0.0);
        assert!((entropy(&DiscreteDistribution::uniform(2)) - LN2).abs() < 1e-15);
        assert!((entropy(&DiscreteDistribution::uniform(9)) - 9f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn kl_examples() {
        let p = DiscreteDistribution::new(vec![0.3, 0.7]).unwrap();
        assert_eq!(kl_discrete(&p, &p).unwrap().nats, 0.0);
        let d = DiscreteDistribution::new(vec![1.0, 0.0]).unwrap();
        let h = DiscreteDistribution::uniform(2);
        assert!((kl_discrete(&d, &h).unwrap().nats - LN2).abs() < 1e-15);
        let q = DiscreteDistribution::new(vec![0.25, 0.75]).unwrap();
        let expected = 0.5 * LN2 + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl_discrete(&h, &q).unwrap().nats - expected).abs() < 1e-15);
        assert!((expected - 0.14384).abs() < 1e-5);
    }

    #[test]
    fn kl_absolute_continuity_violation_is_flagged() {
        let h = DiscreteDistribution::uniform(2);
        let d = DiscreteDistribution::delta(2, 0);
        let r = kl_discrete(&h, &d).unwrap();
        assert!(r.nats.is_infinite() && !r.absolutely_continuous);
    }

    #[test]
    fn mutual_information_examples() {
        let u = DiscreteDistribution::uniform(2);
        let prod = DiscreteJoint::product(&["y", "z"], &[u.clone(), DiscreteDistribution::new(vec![0.2, 0.8]).unwrap()]).unwrap();
        assert!(mutual_information(&prod, &["y"], &["z"], &[]).unwrap().abs() < 1e-15);

        let id = DiscreteChannel::identity(2).joint(&u).unwrap();
        assert!((mutual_information(&id, &["in"], &["out"], &[]).unwrap() - LN2).abs() < 1e-15);

        let bsc = DiscreteChannel::new(vec![vec![0.75, 0.25], vec![0.25, 0.75]]).unwrap().joint(&u).unwrap();
        let hb = -(0.25f64 * 0.25f64.ln() + 0.75 * 0.75f64.ln());
        let mi = mutual_information(&bsc, &["in"], &["out"], &[]).unwrap();
        assert!((mi - (LN2 - hb)).abs() < 1e-15);
        assert!((mi - 0.130812).abs() < 1e-6);
    }

    #[test]
    fn conditional_mutual_information_of_xor() {
        // z = y1 xor y2 with independent uniform bits: I(y1; z) = 0, I(y1; z | y2) = ln 2.
        let mut t = vec![0.0; 8];
        for a in 0..2 {
            for b in 0..2 {
                t[a * 4 + b * 2 + (a ^ b)] = 0.25;
            }
        }
        let j = DiscreteJoint::new(vec!["y1".into(), "y2".into(), "z".into()], vec![2, 2, 2], t).unwrap();
        assert!(mutual_information(&j, &["y1"], &["z"], &[]).unwrap().abs() < 1e-15);
        assert!((mutual_information(&j, &["y1"], &["z"], &["y2"]).unwrap() - LN2).abs() < 1e-15);
        assert!(mutual_information(&j, &["y1"], &["y1"], &[]).is_err());
        assert!(matches!(mutual_information(&j, &["q"], &["z"], &[]), Err(InfoError::UnknownAxis(_))));
    }

    #[test]
    fn identity_examples() {
        let c = DiscreteChannel::constant(3, &DiscreteDistribution::new(vec![0.1, 0.9]).unwrap());
        let r = mi_identity_check(&DiscreteDistribution::uniform(3), &c).unwrap();
        assert!(r.lhs.abs() < 1e-15 && r.rhs.abs() < 1e-15);
        let k = 5;
        let r = mi_identity_check(&DiscreteDistribution::uniform(k), &DiscreteChannel::identity(k)).unwrap();
        assert!((r.lhs - (k as f64).ln()).abs() < 1e-14);
        assert!((r.rhs - (k as f64).ln()).abs() < 1e-14);
    }

    #[test]
    fn total_correlation_examples() {
        let u = DiscreteDistribution::uniform(2);
        let three = DiscreteJoint::product(&["a", "b", "c"], &[u.clone(), u.clone(), u.clone()]).unwrap();
        assert!(total_correlation_discrete(&three).unwrap().abs() < 1e-15);
        let corr = DiscreteChannel::identity(2).joint(&u).unwrap();
        assert!((total_correlation_discrete(&corr).unwrap() - LN2).abs() < 1e-15);
        let one = corr.marginal(&["in"]).unwrap();
        assert!(total_correlation_discrete(&one).is_err());
    }

    #[test]
    fn compose_examples() {
        let id = DiscreteChannel::identity(3);
        assert_eq!(compose_channels(&id, &id).unwrap(), id);
        let out = DiscreteDistribution::new(vec![0.4, 0.6]).unwrap();
        let mut rng = seeded(4);
        let any = random_channel(&mut rng, 4, 3);
        let constant = DiscreteChannel::constant(3, &out);
        let composed = compose_channels(&any, &constant).unwrap();
        for row in composed.rows() {
            assert!((row[0] - 0.4).abs() < 1e-15 && (row[1] - 0.6).abs() < 1e-15);
        }
        assert!(compose_channels(&constant, &any).is_err());
    }

    #[test]
    fn validation_rejects_bad_tables() {
        assert!(DiscreteDistribution::new(vec![0.5, 0.6]).is_err());
        assert!(DiscreteDistribution::new(vec![f64::NAN, 1.0]).is_err());
        assert!(DiscreteChannel::new(vec![vec![1.0], vec![0.5, 0.5]]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn quantities_are_non_negative_and_dpi_holds(seed in 0u64..u64::MAX, ny in 2usize..6, n1 in 2usize..6, n2 in 2usize..6) {
            let mut rng = seeded(seed);
            let prior = DiscreteDistribution::new(simplex(&mut rng, ny)).unwrap();
            let c1 = random_channel(&mut rng, ny, n1);
            let c2 = random_channel(&mut rng, n1, n2);
            let c12 = compose_channels(&c1, &c2).unwrap();
            for row in c12.rows() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            let j1 = c1.joint(&prior).unwrap();
            let j2 = c12.joint(&prior).unwrap();
            let i1 = mutual_information(&j1, &["in"], &["out"], &[]).unwrap();
            let i2 = mutual_information(&j2, &["in"], &["out"], &[]).unwrap();
            prop_assert!(i1 >= -1e-12 && i2 >= -1e-12);
            prop_assert!(i2 <= i1 + 1e-12);
            prop_assert!(entropy(&prior) >= 0.0);
            let tc = total_correlation_discrete(&j1).unwrap();
            prop_assert!((tc - i1).abs() < 1e-12);
            let q = DiscreteDistribution::new(simplex(&mut rng, ny)).unwrap();
            prop_assert!(kl_discrete(&prior, &q).unwrap().nats >= 0.0);
        }

        #[test]
        fn identity_and_cross_entropy_decomposition(seed in 0u64..u64::MAX, ny in 1usize..7, nx in 1usize..7) {
            let mut rng = seeded(seed);
            let prior = DiscreteDistribution::new(simplex(&mut rng, ny)).unwrap();
            let c = random_channel(&mut rng, ny, nx);
            let r = mi_identity_check(&prior, &c).unwrap();
            prop_assert!((r.lhs - r.rhs).abs() < 1e-12);
            let q = DiscreteDistribution::new(simplex(&mut rng, ny)).unwrap();
            let h_pq = cross_entropy_discrete(&prior, &q).unwrap();
            let decomposed = entropy(&prior) + kl_discrete(&prior, &q).unwrap().nats;
            prop_assert!((h_pq - decomposed).abs() < 1e-12);
            prop_assert!(h_pq >= entropy(&prior) - 1e-12);
        }
    }
}
