//! Instance pair construction for the correlation loss.

use rand::seq::index::sample;
use rand::Rng;

use crate::detector::Domain;

/// Pair group by (same domain?, same category?).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PairGroup {
    /// Same domain, same category.
    Sdsc,
    /// Same domain, different category.
    Sddc,
    /// Different domain, same category.
    Ddsc,
    /// Different domain, different category.
    Dddc,
}

/// Two instances, by index into the instance list, and their group.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InstancePair {
    pub a: usize,
    pub b: usize,
    pub group: PairGroup,
}

pub fn classify_pair(a: (Domain, usize), b: (Domain, usize)) -> PairGroup {
    match (a.0 == b.0, a.1 == b.1) {
        (true, true) => PairGroup::Sdsc,
        (true, false) => PairGroup::Sddc,
        (false, true) => PairGroup::Ddsc,
        (false, false) => PairGroup::Dddc,
    }
}

/// Every unordered pair of `instances` (domain, pseudo-label) with its group.
pub fn all_pairs(instances: &[(Domain, usize)]) -> Vec<InstancePair> {
    let mut out = Vec::new();
    for a in 0..instances.len() {
        for b in a + 1..instances.len() {
            let group = classify_pair(instances[a], instances[b]);
            out.push(InstancePair { a, b, group });
        }
    }
    out
}

/// The pairs used by the correlation loss: same-domain/different-category
/// and different-domain/same-category groups only, each reduced to at most
/// `cap` pairs by uniform sampling without replacement. Surviving pairs keep
/// enumeration order, SDDC first.
pub fn build_pairs(instances: &[(Domain, usize)], cap: usize, rng: &mut impl Rng) -> Vec<InstancePair> {
    let all = all_pairs(instances);
    let of = |group| all.iter().copied().filter(|p| p.group == group).collect::<Vec<_>>();
    let mut out = truncate(of(PairGroup::Sddc), cap, rng);
    out.extend(truncate(of(PairGroup::Ddsc), cap, rng));
    out
}

fn truncate(pairs: Vec<InstancePair>, cap: usize, rng: &mut impl Rng) -> Vec<InstancePair> {
    if pairs.len() <= cap {
        return pairs;
    }
    let mut idx = sample(rng, pairs.len(), cap).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| pairs[i]).collect()
}
