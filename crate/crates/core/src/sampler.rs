//! Identity-balanced batch sampling.
//!
//! Both modes draw `P` distinct identities per batch and `B` samples per
//! identity. `pk` picks an identity's samples uniformly; `proportional-ras`
//! splits the per-identity budget across that identity's appearances in
//! proportion to their sizes, so every outfit is represented by its share.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::DatasetIndex;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplerMode {
    Pk,
    ProportionalRas,
}

impl std::str::FromStr for SamplerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pk" => Ok(Self::Pk),
            "proportional-ras" => Ok(Self::ProportionalRas),
            other => Err(Error::Config(format!("unknown sampler mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Identities per batch.
    #[serde(rename = "P")]
    pub identities: usize,
    /// Samples per identity per batch.
    #[serde(rename = "B")]
    pub per_identity: usize,
    pub mode: SamplerMode,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            identities: 4,
            per_identity: 4,
            mode: SamplerMode::ProportionalRas,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.identities < 2 || self.per_identity < 2 {
            return Err(Error::Config(format!(
                "sampler needs P >= 2 and B >= 2, got P={} B={}",
                self.identities, self.per_identity
            )));
        }
        Ok(())
    }

    pub fn batch_size(&self) -> usize {
        self.identities * self.per_identity
    }
}

/// Largest-remainder apportionment of `budget` across buckets of the given sizes.
///
/// Floors of the ideal shares `budget * size / total` are assigned first; the
/// remaining units go to the largest fractional parts, ties to the lower index.
pub fn allocate_proportional(sizes: &[usize], budget: usize) -> Result<Vec<usize>> {
    if sizes.is_empty() {
        return Err(Error::Argument("no appearances to allocate over".into()));
    }
    if sizes.iter().any(|&s| s == 0) {
        return Err(Error::Argument("appearance sizes must be positive".into()));
    }
    let total: usize = sizes.iter().sum();
    // exact integer arithmetic: share_k = budget * size_k / total
    let mut counts: Vec<usize> = sizes.iter().map(|&s| budget * s / total).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    // remainder numerators compared exactly; stable sort keeps index order on ties
    order.sort_by(|&a, &b| ((budget * sizes[b]) % total).cmp(&((budget * sizes[a]) % total)));
    for &k in order.iter().take(budget - assigned) {
        counts[k] += 1;
    }
    Ok(counts)
}

/// [`allocate_proportional`], then any count exceeding its bucket is moved to
/// the bucket with the most spare capacity, provided the buckets can hold the
/// whole budget. Otherwise the raw allocation is returned and the caller
/// samples with replacement.
pub fn capped_allocation(sizes: &[usize], budget: usize) -> Result<Vec<usize>> {
    let mut counts = allocate_proportional(sizes, budget)?;
    if sizes.iter().sum::<usize>() < budget {
        return Ok(counts);
    }
    let mut deficit = 0;
    for (c, &s) in counts.iter_mut().zip(sizes) {
        if *c > s {
            deficit += *c - s;
            *c = s;
        }
    }
    while deficit > 0 {
        let (k, _) = sizes
            .iter()
            .zip(&counts)
            .enumerate()
            .map(|(k, (&s, &c))| (k, s - c))
            .filter(|&(_, spare)| spare > 0)
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
            .expect("total capacity covers the budget");
        counts[k] += 1;
        deficit -= 1;
    }
    Ok(counts)
}

/// Draws `count` items: without replacement while the pool lasts, uniformly
/// with replacement only when the pool is smaller than `count`.
fn draw<R: Rng>(pool: &[usize], count: usize, rng: &mut R) -> Vec<usize> {
    if count <= pool.len() {
        pool.choose_multiple(rng, count).copied().collect()
    } else {
        let mut out = pool.to_vec();
        out.shuffle(rng);
        out.extend((0..count - pool.len()).map(|_| pool[rng.gen_range(0..pool.len())]));
        out
    }
}

/// Stateful batch producer; identities are served round-robin from a shuffled queue.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    config: SamplerConfig,
    rng: ChaCha8Rng,
    queue: VecDeque<u32>,
}

impl BatchSampler {
    pub fn new(config: SamplerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            queue: VecDeque::new(),
        })
    }

    /// Sampler whose random stream is determined by `(config.seed, epoch)`.
    pub fn for_epoch(config: SamplerConfig, epoch: u64) -> Result<Self> {
        let mut s = Self::new(config)?;
        s.rng.set_stream(epoch);
        Ok(s)
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    fn check(&self, index: &DatasetIndex) -> Result<()> {
        let n = index.by_identity().len();
        if n < self.config.identities {
            return Err(Error::Config(format!(
                "dataset has {n} identities, sampler needs P={}",
                self.config.identities
            )));
        }
        Ok(())
    }

    fn pick_identities(&mut self, index: &DatasetIndex) -> Vec<u32> {
        let mut chosen = Vec::with_capacity(self.config.identities);
        let mut deferred = Vec::new();
        while chosen.len() < self.config.identities {
            if self.queue.is_empty() {
                let mut ids = index.identities();
                ids.shuffle(&mut self.rng);
                self.queue.extend(ids);
            }
            let id = self.queue.pop_front().expect("queue refilled");
            if chosen.contains(&id) {
                deferred.push(id);
            } else {
                chosen.push(id);
            }
        }
        for id in deferred.into_iter().rev() {
            self.queue.push_front(id);
        }
        chosen
    }

    /// Per-appearance counts for one identity in `proportional-ras` mode, in
    /// clothing-label order.
    pub fn appearance_counts(&self, index: &DatasetIndex, identity: u32) -> Result<Vec<usize>> {
        let sizes: Vec<usize> = index
            .appearances_of(identity)
            .iter()
            .map(|(_, b)| b.len())
            .collect();
        capped_allocation(&sizes, self.config.per_identity)
    }

    pub fn next_batch(&mut self, index: &DatasetIndex) -> Result<Vec<usize>> {
        self.check(index)?;
        let ids = self.pick_identities(index);
        let mut batch = Vec::with_capacity(self.config.batch_size());
        for id in ids {
            match self.config.mode {
                SamplerMode::Pk => {
                    let pool = &index.by_identity()[&id];
                    batch.extend(draw(pool, self.config.per_identity, &mut self.rng));
                }
                SamplerMode::ProportionalRas => {
                    let counts = self.appearance_counts(index, id)?;
                    for ((_, bucket), count) in index.appearances_of(id).into_iter().zip(counts) {
                        batch.extend(draw(bucket, count, &mut self.rng));
                    }
                }
            }
        }
        Ok(batch)
    }

    /// `floor(len / (P * B))` batches; the identity queue restarts so every
    /// identity is served once before any repeats.
    pub fn epoch_plan(&mut self, index: &DatasetIndex) -> Result<Vec<Vec<usize>>> {
        self.check(index)?;
        self.queue.clear();
        let n = index.len() / self.config.batch_size();
        (0..n).map(|_| self.next_batch(index)).collect()
    }
}

pub fn epoch_plan(index: &DatasetIndex, config: &SamplerConfig) -> Result<Vec<Vec<usize>>> {
    BatchSampler::new(*config)?.epoch_plan(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{LabelMap, RgbImage, Sample};
    use std::collections::BTreeMap;
    use std::sync::Arc;

    pub(crate) fn index_with(appearances: &[(u32, u32, usize)]) -> DatasetIndex {
        let mut samples = Vec::new();
        for &(id, clothing, n) in appearances {
            for _ in 0..n {
                let s = Sample::new(
                    RgbImage::filled(1, 1, 0.0),
                    LabelMap::new(1, 1, vec![0]).unwrap(),
                    id,
                    clothing,
                    0,
                )
                .unwrap();
                samples.push(Arc::new(s));
            }
        }
        DatasetIndex::from_samples(samples)
    }

    #[test]
    fn allocation_examples() {
        assert_eq!(allocate_proportional(&[6, 2], 4).unwrap(), vec![3, 1]);
        assert_eq!(allocate_proportional(&[5], 3).unwrap(), vec![3]);
        assert_eq!(allocate_proportional(&[1, 1, 1], 3).unwrap(), vec![1, 1, 1]);
        // ties go to the lower index
        assert_eq!(allocate_proportional(&[1, 1, 1], 2).unwrap(), vec![1, 1, 0]);
        assert!(allocate_proportional(&[], 3).is_err());
    }

    #[test]
    fn capped_allocation_moves_overflow() {
        assert_eq!(allocate_proportional(&[1, 3], 4).unwrap(), vec![1, 3]);
        assert_eq!(capped_allocation(&[1, 1, 6], 7).unwrap().iter().sum::<usize>(), 7);
        let c = capped_allocation(&[1, 1, 6], 7).unwrap();
        assert!(c.iter().zip([1, 1, 6]).all(|(c, s)| *c <= s));
        // not enough samples: keep the proportional split
        assert_eq!(capped_allocation(&[1, 1], 4).unwrap(), vec![2, 2]);
    }

    #[test]
    fn proportional_batch_follows_allocation() {
        let idx = index_with(&[(0, 0, 6), (0, 1, 2), (1, 0, 4), (1, 1, 4)]);
        let cfg = SamplerConfig {
            identities: 2,
            per_identity: 4,
            mode: SamplerMode::ProportionalRas,
            seed: 9,
        };
        let mut s = BatchSampler::new(cfg).unwrap();
        for _ in 0..20 {
            let b = s.next_batch(&idx).unwrap();
            let mut counts: BTreeMap<(u32, u32), usize> = BTreeMap::new();
            for p in &b {
                let smp = idx.get(*p);
                *counts.entry((smp.identity, smp.clothing)).or_default() += 1;
            }
            assert_eq!(counts[&(0, 0)], 3);
            assert_eq!(counts[&(0, 1)], 1);
            assert_eq!(counts[&(1, 0)], 2);
            assert_eq!(counts[&(1, 1)], 2);
            let mut uniq = b.clone();
            uniq.sort();
            uniq.dedup();
            assert_eq!(uniq.len(), b.len());
        }
    }

    #[test]
    fn two_by_two_batch_covers_both_identities() {
        let idx = index_with(&[(0, 0, 2), (1, 0, 2)]);
        let cfg = SamplerConfig {
            identities: 2,
            per_identity: 2,
            mode: SamplerMode::Pk,
            seed: 1,
        };
        let mut b = BatchSampler::new(cfg).unwrap().next_batch(&idx).unwrap();
        b.sort();
        assert_eq!(b, vec![0, 1, 2, 3]);
    }

    #[test]
    fn too_few_identities_is_a_config_error() {
        let idx = index_with(&[(0, 0, 5)]);
        let mut s = BatchSampler::new(SamplerConfig {
            identities: 2,
            per_identity: 2,
            mode: SamplerMode::Pk,
            seed: 0,
        })
        .unwrap();
        assert!(matches!(s.next_batch(&idx), Err(Error::Config(_))));
        assert!(SamplerConfig {
            identities: 1,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn epoch_plan_size_coverage_and_determinism() {
        let idx = index_with(&[(0, 0, 15), (1, 0, 15), (2, 0, 15), (3, 0, 15)]);
        let cfg = SamplerConfig {
            identities: 4,
            per_identity: 5,
            mode: SamplerMode::Pk,
            seed: 5,
        };
        let plan = epoch_plan(&idx, &cfg).unwrap();
        assert_eq!(plan.len(), 3);
        assert_eq!(plan, epoch_plan(&idx, &cfg).unwrap());

        let apps: Vec<(u32, u32, usize)> = (0..12).map(|i| (i, 0, 5)).collect();
        let idx = index_with(&apps);
        let cfg = SamplerConfig {
            identities: 3,
            per_identity: 4,
            mode: SamplerMode::ProportionalRas,
            seed: 2,
        };
        let plan = epoch_plan(&idx, &cfg).unwrap();
        assert_eq!(plan.len(), 5);
        let mut seen: Vec<u32> = plan.iter().flatten().map(|&p| idx.get(p).identity).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 12);
    }
}
