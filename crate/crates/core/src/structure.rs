//! Learning the additive kernel decomposition.
//!
//! Every algorithm is assigned to one of `M` subspaces (its hyperparameters
//! follow it). Assignments carry a Dirichlet–Multinomial prior and are
//! resampled one site at a time by collapsed Gibbs sampling, where each
//! conditional draw is taken with the Gumbel-Max trick over the scores
//! `log p(H | z[site <- m]) + log(count_stage(m) + gamma_m)`.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::gp::{fit_params, FitOptions, GpInput, KernelLayout, KernelParams, SurrogateModel};
use crate::rng::Rng;
use crate::space::SearchSpace;

/// Assignment of every algorithm (by global index) to a subspace in `0..M`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Decomposition {
    assignment: Vec<usize>,
    n_subspaces: usize,
}

impl Decomposition {
    pub fn new(assignment: Vec<usize>, n_subspaces: usize) -> Result<Self> {
        if n_subspaces == 0 {
            return Err(Error::InvalidDecomposition("M must be at least 1".into()));
        }
        if let Some(&bad) = assignment.iter().find(|&&m| m >= n_subspaces) {
            return Err(Error::InvalidDecomposition(format!("subspace {bad} out of range for M = {n_subspaces}")));
        }
        Ok(Decomposition { assignment, n_subspaces })
    }

    /// Everything in one subspace.
    pub fn single(n_algorithms: usize) -> Self {
        Decomposition { assignment: vec![0; n_algorithms], n_subspaces: 1 }
    }

    /// All algorithms of stage `v` in subspace `v mod M`.
    pub fn stage_aligned(space: &SearchSpace, n_subspaces: usize) -> Self {
        let n = n_subspaces.max(1);
        let assignment = (0..space.n_algorithms()).map(|g| space.algorithm_ref(g).stage_index % n).collect();
        Decomposition { assignment, n_subspaces: n }
    }

    pub fn random(n_algorithms: usize, n_subspaces: usize, rng: &mut Rng) -> Self {
        let assignment = (0..n_algorithms).map(|_| rng.random_range(0..n_subspaces)).collect();
        Decomposition { assignment, n_subspaces }
    }

    pub fn get(&self, algorithm: usize) -> usize {
        self.assignment[algorithm]
    }

    pub fn set(&mut self, algorithm: usize, subspace: usize) {
        assert!(subspace < self.n_subspaces, "subspace out of range");
        self.assignment[algorithm] = subspace;
    }

    pub fn with(&self, algorithm: usize, subspace: usize) -> Self {
        let mut z = self.clone();
        z.set(algorithm, subspace);
        z
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn n_subspaces(&self) -> usize {
        self.n_subspaces
    }

    pub fn n_algorithms(&self) -> usize {
        self.assignment.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.n_subspaces];
        for &m in &self.assignment {
            c[m] += 1;
        }
        c
    }

    pub fn members(&self, subspace: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&g| self.assignment[g] == subspace).collect()
    }

    /// Per-subspace counts among the algorithms of one stage, optionally
    /// leaving one algorithm out.
    pub fn stage_counts(&self, space: &SearchSpace, stage_index: usize, exclude: Option<usize>) -> Vec<usize> {
        let mut c = vec![0; self.n_subspaces];
        for g in space.stage_algorithms(stage_index) {
            if Some(g) != exclude {
                c[self.assignment[g]] += 1;
            }
        }
        c
    }

    pub fn check_space(&self, space: &SearchSpace) -> Result<()> {
        if self.assignment.len() != space.n_algorithms() {
            return Err(Error::InvalidDecomposition(format!(
                "decomposition covers {} algorithms, space has {}",
                self.assignment.len(),
                space.n_algorithms()
            )));
        }
        Ok(())
    }

    /// Structural invariant: every algorithm assigned exactly once to a
    /// subspace in range, counts summing to the number of algorithms.
    pub fn is_valid_for(&self, space: &SearchSpace) -> bool {
        self.assignment.len() == space.n_algorithms()
            && self.assignment.iter().all(|&m| m < self.n_subspaces)
            && self.counts().iter().sum::<usize>() == space.n_algorithms()
    }

    /// Relabels subspaces by descending size (ties by first member) and
    /// returns the relabeled decomposition with the permutation used
    /// (`perm[old] = new`).
    pub fn sorted_by_size(&self) -> (Self, Vec<usize>) {
        let counts = self.counts();
        let first: Vec<usize> =
            (0..self.n_subspaces).map(|m| self.assignment.iter().position(|&x| x == m).unwrap_or(usize::MAX)).collect();
        let mut order: Vec<usize> = (0..self.n_subspaces).collect();
        order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(first[a].cmp(&first[b])).then(a.cmp(&b)));
        let mut perm = vec![0; self.n_subspaces];
        for (new, &old) in order.iter().enumerate() {
            perm[old] = new;
        }
        let assignment = self.assignment.iter().map(|&m| perm[m]).collect();
        (Decomposition { assignment, n_subspaces: self.n_subspaces }, perm)
    }

    /// Groups as lists of qualified algorithm names, non-empty subspaces only.
    pub fn describe(&self, space: &SearchSpace) -> Vec<(usize, Vec<String>)> {
        (0..self.n_subspaces)
            .filter_map(|m| {
                let names: Vec<String> = self.members(m).into_iter().map(|g| space.qualified_name(g)).collect();
                (!names.is_empty()).then_some((m, names))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructurePrior {
    pub gamma: Vec<f64>,
}

impl StructurePrior {
    pub fn new(gamma: Vec<f64>) -> Result<Self> {
        if gamma.is_empty() {
            return Err(Error::InvalidArgument("structure prior needs M >= 1".into()));
        }
        if gamma.iter().any(|g| !(g.is_finite() && *g > 0.0)) {
            return Err(Error::InvalidArgument("Dirichlet concentrations must be positive".into()));
        }
        Ok(StructurePrior { gamma })
    }

    pub fn symmetric(m: usize, gamma: f64) -> Result<Self> {
        Self::new(vec![gamma; m])
    }

    /// Default for a space: `M = #stages + 2`, `gamma = 1`.
    pub fn default_for(space: &SearchSpace) -> Self {
        StructurePrior { gamma: vec![1.0; space.n_stages() + 2] }
    }

    pub fn m(&self) -> usize {
        self.gamma.len()
    }

    /// `log P(z | gamma)` with the mixing proportions integrated out.
    pub fn log_prior(&self, z: &Decomposition) -> f64 {
        log_dirichlet_multinomial(&z.counts(), &self.gamma)
    }
}

/// Log probability of one specific assignment sequence with the given
/// per-subspace counts under a Dirichlet–Multinomial with concentrations
/// `gamma`.
pub fn log_dirichlet_multinomial(counts: &[usize], gamma: &[f64]) -> f64 {
    let n: usize = counts.iter().sum();
    let g: f64 = gamma.iter().sum();
    let mut v = ln_gamma(g) - ln_gamma(n as f64 + g);
    for (&c, &gm) in counts.iter().zip(gamma) {
        v += ln_gamma(c as f64 + gm) - ln_gamma(gm);
    }
    v
}

/// One Gumbel(0, 1) draw.
pub fn gumbel(rng: &mut Rng) -> f64 {
    // open interval (0, 1)
    let u: f64 = loop {
        let u = rng.random::<f64>();
        if u > 0.0 {
            break u;
        }
    };
    -(-u.ln()).ln()
}

/// Index maximizing `scores[i] + Gumbel noise`; equivalent to sampling from
/// `softmax(scores)`. `-inf` scores are never chosen unless all are.
pub fn gumbel_max(scores: &[f64], rng: &mut Rng) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &s) in scores.iter().enumerate() {
        let noise = gumbel(rng);
        let v = s + noise;
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Chance-corrected agreement between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let choose2 = |x: u64| (x * x.saturating_sub(1)) as f64 / 2.0;
    let mut table: HashMap<(usize, usize), u64> = HashMap::new();
    let mut ra: HashMap<usize, u64> = HashMap::new();
    let mut rb: HashMap<usize, u64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *ra.entry(x).or_default() += 1;
        *rb.entry(y).or_default() += 1;
    }
    let index: f64 = table.values().map(|&c| choose2(c)).sum();
    let sa: f64 = ra.values().map(|&c| choose2(c)).sum();
    let sb: f64 = rb.values().map(|&c| choose2(c)).sum();
    let total = choose2(n as u64);
    if total == 0.0 {
        return 1.0;
    }
    let expected = sa * sb / total;
    let max = 0.5 * (sa + sb);
    if (max - expected).abs() < 1e-12 {
        // both labelings trivial in the same way (one cluster, or all singletons)
        return 1.0;
    }
    (index - expected) / (max - expected)
}

// ---------------------------------------------------------------------------
// Evidence evaluation with a per-decomposition parameter cache

/// Observations plus the cache of fitted kernel parameters per
/// decomposition. Parameters found for a decomposition are reused on later
/// calls (and later iterations) without refitting.
#[derive(Clone, Debug)]
pub struct EvidenceContext {
    pub layout: KernelLayout,
    pub inputs: Vec<GpInput>,
    pub y: Vec<f64>,
    pub extra_noise: Option<Vec<f64>>,
    /// Options for the quick fit run on a decomposition seen for the first time.
    pub quick_fit: FitOptions,
    pub cache: ParamCache,
}

/// Fitted parameters per decomposition, with the number of observations
/// they were fitted on.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<CachedFit>", into = "Vec<CachedFit>")]
pub struct ParamCache {
    map: HashMap<Vec<usize>, (KernelParams, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CachedFit {
    pub assignment: Vec<usize>,
    pub params: KernelParams,
    pub n_observations: usize,
}

impl ParamCache {
    pub fn get(&self, z: &Decomposition) -> Option<&KernelParams> {
        self.map.get(z.assignment()).map(|(p, _)| p)
    }

    /// Parameters for `z` together with the observation count they were
    /// fitted on.
    pub fn get_with_count(&self, z: &Decomposition) -> Option<(&KernelParams, usize)> {
        self.map.get(z.assignment()).map(|(p, n)| (p, *n))
    }

    pub fn insert(&mut self, z: &Decomposition, params: KernelParams, n_observations: usize) {
        self.map.insert(z.assignment().to_vec(), (params, n_observations));
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Drops entries whose parameter shape does not match `M`.
    pub fn retain_shape(&mut self, m: usize) {
        self.map.retain(|_, (p, _)| p.n_subspaces() == m);
    }
}

impl From<Vec<CachedFit>> for ParamCache {
    fn from(v: Vec<CachedFit>) -> Self {
        ParamCache { map: v.into_iter().map(|c| (c.assignment, (c.params, c.n_observations))).collect() }
    }
}

impl From<ParamCache> for Vec<CachedFit> {
    fn from(c: ParamCache) -> Self {
        let mut v: Vec<CachedFit> = c
            .map
            .into_iter()
            .map(|(assignment, (params, n_observations))| CachedFit { assignment, params, n_observations })
            .collect();
        v.sort_by(|a, b| a.assignment.cmp(&b.assignment));
        v
    }
}

impl EvidenceContext {
    pub fn new(layout: KernelLayout, inputs: Vec<GpInput>, y: Vec<f64>) -> Self {
        EvidenceContext {
            layout,
            inputs,
            y,
            extra_noise: None,
            quick_fit: FitOptions { restarts: 1, max_iter: 15 },
            cache: ParamCache::default(),
        }
    }

    pub fn n_observations(&self) -> usize {
        self.y.len()
    }

    pub fn condition(&self, z: &Decomposition, params: &KernelParams) -> Result<SurrogateModel> {
        SurrogateModel::condition(
            self.layout.clone(),
            z.clone(),
            params.clone(),
            self.inputs.clone(),
            self.y.clone(),
            self.extra_noise.clone(),
        )
    }

    /// GP log evidence of the observations under `z` with the given
    /// parameters (no fitting).
    pub fn evidence_with(&self, z: &Decomposition, params: &KernelParams) -> Result<f64> {
        if self.y.is_empty() {
            return Ok(0.0);
        }
        Ok(self.condition(z, params)?.log_marginal_likelihood())
    }

    /// GP log evidence under `z` at parameters fitted for `z`. Parameters
    /// cached for the current observations are reused as they are. Cached
    /// parameters from fewer observations seed a quick refit, so a
    /// decomposition visited early is not judged by stale parameters against
    /// freshly fitted ones. Without a cache entry the quick fit starts from
    /// the data-scaled default: starting from another decomposition's
    /// parameters tends to inherit its local optimum.
    pub fn evidence(&mut self, z: &Decomposition, rng: &mut Rng) -> Result<f64> {
        let n = self.y.len();
        if n == 0 {
            return Ok(0.0);
        }
        let cached = self.cache.get_with_count(z).map(|(p, c)| (p.clone(), c));
        if let Some((p, count)) = &cached {
            if *count == n {
                return self.evidence_with(z, p);
            }
        }
        let fit = if n >= 2 {
            let init = cached.as_ref().map(|(p, _)| p);
            let options = FitOptions { restarts: 1, ..self.quick_fit };
            fit_params(&self.layout, z, &self.inputs, &self.y, self.extra_noise.as_deref(), init, options, rng)?
        } else {
            let params = self.initial_params(z);
            let lml = self.evidence_with(z, &params)?;
            crate::gp::FitResult { params, log_marginal_likelihood: lml, trace: vec![lml] }
        };
        self.cache.insert(z, fit.params, n);
        Ok(fit.log_marginal_likelihood)
    }

    fn initial_params(&self, z: &Decomposition) -> KernelParams {
        KernelParams::initial(z.n_subspaces(), self.layout.n_hyperparams(), &self.y)
    }

    pub fn cached_params(&self, z: &Decomposition) -> Option<&KernelParams> {
        self.cache.get(z)
    }
}

/// `log P(H | z) + log P(z | gamma)`; the prior term alone for an empty history.
pub fn log_unnorm_posterior(
    z: &Decomposition,
    prior: &StructurePrior,
    ctx: &mut EvidenceContext,
    rng: &mut Rng,
) -> Result<f64> {
    if prior.m() != z.n_subspaces() {
        return Err(Error::InvalidArgument(format!(
            "prior has M = {}, decomposition has M = {}",
            prior.m(),
            z.n_subspaces()
        )));
    }
    Ok(ctx.evidence(z, rng)? + prior.log_prior(z))
}

/// One collapsed Gibbs sweep over every algorithm in a seeded random order.
pub fn gibbs_sweep(
    z: &Decomposition,
    prior: &StructurePrior,
    space: &SearchSpace,
    ctx: &mut EvidenceContext,
    rng: &mut Rng,
) -> Result<Decomposition> {
    z.check_space(space)?;
    if prior.m() != z.n_subspaces() {
        return Err(Error::InvalidArgument("prior and decomposition disagree on M".into()));
    }
    let m = z.n_subspaces();
    let mut z = z.clone();
    if m == 1 {
        return Ok(z);
    }
    let mut sites: Vec<usize> = (0..z.n_algorithms()).collect();
    sites.shuffle(rng);
    for g in sites {
        let stage = space.algorithm_ref(g).stage_index;
        let counts = z.stage_counts(space, stage, Some(g));
        let mut scores = Vec::with_capacity(m);
        for (c, &count) in counts.iter().enumerate().take(m) {
            let candidate = z.with(g, c);
            let lml = match ctx.evidence(&candidate, rng) {
                Ok(v) if v.is_finite() => v,
                Ok(_) | Err(Error::Factorization { .. }) => f64::NEG_INFINITY,
                Err(e) => return Err(e),
            };
            scores.push(lml + (count as f64 + prior.gamma[c]).ln());
        }
        let chosen = gumbel_max(&scores, rng);
        z.set(g, chosen);
    }
    Ok(z)
}

/// Kind of move taken by [`split_merge`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitMerge {
    Split,
    Merge,
    Rejected,
}

/// Restricted Gibbs scans run on the random launch state of a split-merge
/// proposal before the scan that defines it.
pub const SPLIT_MERGE_SCANS: usize = 3;

/// One split-merge Metropolis-Hastings move with restricted Gibbs launch
/// states.
///
/// Two distinct algorithms `i`, `j` are drawn. When they share a subspace,
/// `j` moves to an empty subspace, the other members are split at random
/// between the two, and a few restricted Gibbs scans at fixed kernel
/// parameters refine the split; one last scan produces the proposal and its
/// probability. When they do not share one, the proposal merges the two
/// subspaces and the same construction gives the reverse split probability.
/// Single-site sweeps cannot take apart a merged subspace whose members
/// interact, since every intermediate state breaks an interaction.
pub fn split_merge(
    z: &Decomposition,
    prior: &StructurePrior,
    space: &SearchSpace,
    ctx: &mut EvidenceContext,
    rng: &mut Rng,
) -> Result<(Decomposition, SplitMerge)> {
    z.check_space(space)?;
    if prior.m() != z.n_subspaces() {
        return Err(Error::InvalidArgument("prior and decomposition disagree on M".into()));
    }
    let n = z.n_algorithms();
    if z.n_subspaces() == 1 || n < 2 || ctx.y.is_empty() {
        return Ok((z.clone(), SplitMerge::Rejected));
    }
    let i = rng.random_range(0..n);
    let mut j = rng.random_range(0..n - 1);
    if j >= i {
        j += 1;
    }
    let (ci, cj) = (z.get(i), z.get(j));
    let current = log_unnorm_posterior(z, prior, ctx, rng)?;
    let mut params = ctx.cached_params(z).cloned().unwrap_or_else(|| ctx.initial_params(z));

    let split_to = if ci == cj {
        match z.counts().iter().position(|&c| c == 0) {
            Some(cn) => cn,
            None => return Ok((z.clone(), SplitMerge::Rejected)),
        }
    } else {
        cj
    };
    if ci == cj {
        params.signal_variance[split_to] = params.signal_variance[ci];
        params.rho[split_to] = params.rho[ci];
    }
    let pair = [ci, split_to];
    let others: Vec<usize> = (0..n).filter(|&g| g != i && g != j && (z.get(g) == ci || z.get(g) == cj)).collect();
    let mut launch = z.with(j, split_to);
    for &g in &others {
        launch.set(g, pair[rng.random_range(0..2)]);
    }
    for _ in 0..SPLIT_MERGE_SCANS {
        for &g in &others {
            let logp = allocation_log_probs(&launch, g, pair, prior, space, ctx, &params)?;
            launch.set(g, pair[gumbel_max(&logp, rng)]);
        }
    }

    let mut log_q = 0.0;
    let (proposal, log_ratio, kind) = if ci == cj {
        for &g in &others {
            let logp = allocation_log_probs(&launch, g, pair, prior, space, ctx, &params)?;
            let pick = gumbel_max(&logp, rng);
            log_q += logp[pick];
            launch.set(g, pair[pick]);
        }
        let lp = log_unnorm_posterior(&launch, prior, ctx, rng)?;
        (launch, lp - current - log_q, SplitMerge::Split)
    } else {
        for &g in &others {
            let logp = allocation_log_probs(&launch, g, pair, prior, space, ctx, &params)?;
            let target = z.get(g);
            log_q += logp[usize::from(target == cj)];
            launch.set(g, target);
        }
        let mut merged = z.clone();
        for g in z.members(cj) {
            merged.set(g, ci);
        }
        let lp = log_unnorm_posterior(&merged, prior, ctx, rng)?;
        (merged, lp - current + log_q, SplitMerge::Merge)
    };
    let u: f64 = rng.random();
    if log_ratio.is_finite() && u.ln() < log_ratio {
        Ok((proposal, kind))
    } else {
        Ok((z.clone(), SplitMerge::Rejected))
    }
}

/// Normalized log probabilities of placing `g` in each of two subspaces,
/// scored like a Gibbs conditional but at fixed parameters.
fn allocation_log_probs(
    state: &Decomposition,
    g: usize,
    options: [usize; 2],
    prior: &StructurePrior,
    space: &SearchSpace,
    ctx: &EvidenceContext,
    params: &KernelParams,
) -> Result<Vec<f64>> {
    let counts = state.stage_counts(space, space.algorithm_ref(g).stage_index, Some(g));
    let mut scores = Vec::with_capacity(2);
    for c in options {
        let lml = match ctx.evidence_with(&state.with(g, c), params) {
            Ok(v) if v.is_finite() => v,
            Ok(_) | Err(Error::Factorization { .. }) => f64::NEG_INFINITY,
            Err(e) => return Err(e),
        };
        scores.push(lml + (counts[c] as f64 + prior.gamma[c]).ln());
    }
    let top = scores[0].max(scores[1]);
    if top == f64::NEG_INFINITY {
        return Ok(vec![(0.5f64).ln(); 2]);
    }
    let norm = top + scores.iter().map(|s| (s - top).exp()).sum::<f64>().ln();
    Ok(scores.into_iter().map(|s| s - norm).collect())
}

// ---------------------------------------------------------------------------
// Sample pool

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub decomposition: Decomposition,
    pub log_posterior: f64,
    pub params: KernelParams,
    /// Insertion sequence number; earlier wins ties.
    pub seq: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePool {
    capacity: usize,
    entries: Vec<PoolEntry>,
    next_seq: u64,
}

impl SamplePool {
    pub fn new(capacity: usize) -> Self {
        SamplePool { capacity: capacity.max(1), entries: Vec::new(), next_seq: 0 }
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn insert(&mut self, decomposition: Decomposition, log_posterior: f64, params: KernelParams) -> Result<()> {
        if !log_posterior.is_finite() {
            return Err(Error::InvalidArgument("pool entries need a finite log-posterior".into()));
        }
        self.entries.push(PoolEntry { decomposition, log_posterior, params, seq: self.next_seq });
        self.next_seq += 1;
        while self.entries.len() > self.capacity {
            // evict the lowest score; among equals, the most recent
            let (idx, _) = self
                .entries
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| a.log_posterior.total_cmp(&b.log_posterior).then(b.seq.cmp(&a.seq)))
                .expect("pool is non-empty");
            self.entries.remove(idx);
        }
        Ok(())
    }

    /// Inserts, or refreshes the score and parameters of an identical
    /// decomposition already in the pool.
    pub fn upsert(&mut self, decomposition: Decomposition, log_posterior: f64, params: KernelParams) -> Result<()> {
        if let Some(e) = self.entries.iter_mut().find(|e| e.decomposition == decomposition) {
            if !log_posterior.is_finite() {
                return Err(Error::InvalidArgument("pool entries need a finite log-posterior".into()));
            }
            e.log_posterior = log_posterior;
            e.params = params;
            return Ok(());
        }
        self.insert(decomposition, log_posterior, params)
    }

    /// Entry with the highest log-posterior, earliest insertion on ties.
    pub fn map_entry(&self) -> Result<&PoolEntry> {
        self.entries
            .iter()
            .min_by(|a, b| b.log_posterior.total_cmp(&a.log_posterior).then(a.seq.cmp(&b.seq)))
            .ok_or_else(|| Error::InvalidArgument("sample pool is empty".into()))
    }

    pub fn map_decomposition(&self) -> Result<&Decomposition> {
        self.map_entry().map(|e| &e.decomposition)
    }

    /// Recomputes every entry's score against the current observations
    /// with its stored parameters, then refits the `refresh` best entries
    /// through `ctx` so the leaders are compared at current parameters.
    /// Entries that fail to factorize are dropped.
    pub fn rescore(
        &mut self,
        prior: &StructurePrior,
        ctx: &mut EvidenceContext,
        refresh: usize,
        rng: &mut Rng,
    ) -> Result<()> {
        self.entries.retain_mut(|e| match ctx.evidence_with(&e.decomposition, &e.params) {
            Ok(lml) if lml.is_finite() => {
                e.log_posterior = lml + prior.log_prior(&e.decomposition);
                true
            }
            _ => false,
        });
        let mut order: Vec<usize> = (0..self.entries.len()).collect();
        order.sort_by(|&a, &b| self.entries[b].log_posterior.total_cmp(&self.entries[a].log_posterior));
        for &k in order.iter().take(refresh) {
            let z = self.entries[k].decomposition.clone();
            if ctx.cached_params(&z).is_none() {
                // count 0 marks the entry's parameters as a refit seed
                ctx.cache.insert(&z, self.entries[k].params.clone(), 0);
            }
            match log_unnorm_posterior(&z, prior, ctx, rng) {
                Ok(lp) if lp.is_finite() => {
                    let e = &mut self.entries[k];
                    e.log_posterior = lp;
                    e.params = ctx.cached_params(&z).cloned().expect("evidence caches its fit");
                }
                Ok(_) | Err(Error::Factorization { .. }) => self.entries[k].log_posterior = f64::NEG_INFINITY,
                Err(e) => return Err(e),
            }
        }
        self.entries.retain(|e| e.log_posterior.is_finite());
        Ok(())
    }

    /// Self-normalized posterior probabilities of the entries.
    pub fn probabilities(&self) -> Vec<f64> {
        let max = self.entries.iter().map(|e| e.log_posterior).fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = self.entries.iter().map(|e| (e.log_posterior - max).exp()).collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|v| v / total).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn two_alg_space() -> SearchSpace {
        SearchSpace::from_toml(
            r#"
            [[stages]]
            stage = "feature_processing"
            [[stages.algorithms]]
            name = "pca"
            [[stages]]
            stage = "prediction"
            [[stages.algorithms]]
            name = "tree"
            "#,
        )
        .unwrap()
    }

    fn dummy_params(m: usize, h: usize) -> KernelParams {
        KernelParams::new(m, h)
    }

    #[test]
    fn dirichlet_multinomial_enumeration() {
        let gamma = [1.0, 1.0];
        let p20 = log_dirichlet_multinomial(&[2, 0], &gamma).exp();
        let p02 = log_dirichlet_multinomial(&[0, 2], &gamma).exp();
        let p11 = log_dirichlet_multinomial(&[1, 1], &gamma).exp();
        assert!((p20 - 1.0 / 3.0).abs() < 1e-12);
        assert!((p02 - p20).abs() < 1e-12);
        assert!((p11 - 1.0 / 6.0).abs() < 1e-12);
        // the four assignments (2,0), (0,2), and two of (1,1) exhaust the mass
        assert!((p20 + p02 + 2.0 * p11 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_history_posterior_is_prior() {
        let space = two_alg_space();
        let prior = StructurePrior::symmetric(2, 1.0).unwrap();
        let mut ctx = EvidenceContext::new(KernelLayout::new(&space), vec![], vec![]);
        let mut r = rng::from_seed(0);
        let mut lp =
            |a: Vec<usize>| log_unnorm_posterior(&Decomposition::new(a, 2).unwrap(), &prior, &mut ctx, &mut r).unwrap();
        let (a, b, c, d) = (lp(vec![0, 0]), lp(vec![1, 1]), lp(vec![0, 1]), lp(vec![1, 0]));
        assert!((a - b).abs() < 1e-12 && (c - d).abs() < 1e-12);
        assert!((a - c - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_subspace_sweep_is_identity() {
        let space = two_alg_space();
        let prior = StructurePrior::symmetric(1, 1.0).unwrap();
        let mut ctx = EvidenceContext::new(KernelLayout::new(&space), vec![], vec![]);
        let z = Decomposition::single(2);
        let out = gibbs_sweep(&z, &prior, &space, &mut ctx, &mut rng::from_seed(1)).unwrap();
        assert_eq!(out, z);
    }

    #[test]
    fn gumbel_max_matches_categorical() {
        let scores = [0.9f64.ln(), 0.1f64.ln()];
        let mut r = rng::from_seed(3);
        let n = 100_000;
        let hits = (0..n).filter(|_| gumbel_max(&scores, &mut r) == 0).count();
        let freq = hits as f64 / n as f64;
        assert!((freq - 0.9).abs() < 0.01, "{freq}");
    }

    #[test]
    fn gumbel_max_never_picks_neg_infinity() {
        let mut r = rng::from_seed(4);
        for _ in 0..1000 {
            assert_eq!(gumbel_max(&[f64::NEG_INFINITY, -50.0], &mut r), 1);
        }
    }

    #[test]
    fn map_tie_break_prefers_earliest() {
        let mut pool = SamplePool::new(10);
        for (i, s) in [-5.0, -3.0, -3.0].into_iter().enumerate() {
            pool.insert(Decomposition::new(vec![i % 2], 2).unwrap(), s, dummy_params(2, 0)).unwrap();
        }
        let e = pool.map_entry().unwrap();
        assert_eq!(e.seq, 1);
        assert_eq!(e.log_posterior, -3.0);

        let single = {
            let mut p = SamplePool::new(3);
            p.insert(Decomposition::single(3), -1.0, dummy_params(1, 0)).unwrap();
            p
        };
        assert_eq!(single.map_decomposition().unwrap(), &Decomposition::single(3));
        assert!(SamplePool::new(3).map_entry().is_err());
    }

    #[test]
    fn pool_evicts_lowest_and_rejects_nonfinite() {
        let mut pool = SamplePool::new(2);
        pool.insert(Decomposition::single(1), -1.0, dummy_params(1, 0)).unwrap();
        pool.insert(Decomposition::single(2), -9.0, dummy_params(1, 0)).unwrap();
        pool.insert(Decomposition::single(3), -2.0, dummy_params(1, 0)).unwrap();
        let scores: Vec<f64> = pool.entries().iter().map(|e| e.log_posterior).collect();
        assert_eq!(scores, vec![-1.0, -2.0]);
        assert!(pool.insert(Decomposition::single(1), f64::NAN, dummy_params(1, 0)).is_err());
        pool.upsert(Decomposition::single(1), -0.5, dummy_params(1, 0)).unwrap();
        assert_eq!(pool.len(), 2);
        assert_eq!(pool.map_entry().unwrap().log_posterior, -0.5);
    }

    #[test]
    fn ari_basics() {
        assert!((adjusted_rand_index(&[0, 0, 1, 1, 2, 2], &[5, 5, 3, 3, 9, 9]) - 1.0).abs() < 1e-12);
        let v = adjusted_rand_index(&[0, 0, 0, 1, 1, 1], &[0, 1, 0, 1, 0, 1]);
        assert!(v < 0.1);
        // (1 - 1/3) / (3/2 - 1/3) = 4/7
        let v = adjusted_rand_index(&[0, 0, 1, 1], &[0, 0, 1, 2]);
        assert!((v - 0.5714285714285715).abs() < 1e-12, "{v}");
    }

    #[test]
    fn sorted_by_size_relabels() {
        let z = Decomposition::new(vec![2, 2, 0, 2, 0, 1], 4).unwrap();
        let (s, perm) = z.sorted_by_size();
        assert_eq!(s.assignment(), &[0, 0, 1, 0, 1, 2]);
        assert_eq!(perm, vec![1, 2, 0, 3]);
    }
}
