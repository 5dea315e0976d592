//! The optimization loop: UCB acquisition over the additive surrogate,
//! candidate search that exploits the decomposition, diverse batch
//! selection, and the evaluate / learn-structure / refit cycle.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gp::{fit_params, FitOptions, GpInput, KernelLayout, KernelParams, SurrogateModel};
use crate::metrics::Metric;
use crate::objective::{EvalStatus, EvaluationRequest, EvaluationResult, Evaluator};
use crate::rng::{self, streams, Rng};
use crate::space::{EncodedPoint, ParamKind, PipelineConfig, SearchSpace, Stage};
use crate::structure::{
    gibbs_sweep, log_unnorm_posterior, split_merge, Decomposition, EvidenceContext, ParamCache, SamplePool,
    StructurePrior,
};

/// `max(1, 2 log(D t^2 pi^2 / 6))`.
pub fn beta_default(t: usize, dimension: usize) -> f64 {
    let t = t.max(1) as f64;
    (2.0 * (dimension as f64 * t * t * PI * PI / 6.0).ln()).max(1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BetaSchedule {
    Default,
    Constant { value: f64 },
}

impl BetaSchedule {
    pub fn beta(&self, t: usize, dimension: usize) -> f64 {
        match *self {
            BetaSchedule::Default => beta_default(t, dimension),
            BetaSchedule::Constant { value } => value,
        }
    }
}

/// Posterior mean plus `sqrt(beta)` posterior standard deviations.
pub fn ucb(model: &SurrogateModel, query: &EncodedPoint, beta: f64) -> Result<f64> {
    if !(beta >= 0.0) {
        return Err(Error::InvalidArgument("beta must be nonnegative".into()));
    }
    Ok(ucb_input(model, &model.layout().input(query)?, beta))
}

fn ucb_input(model: &SurrogateModel, input: &GpInput, beta: f64) -> f64 {
    let (mean, var) = model.posterior(input);
    mean + beta.sqrt() * var.sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AcquisitionConfig {
    pub beta: BetaSchedule,
    /// Random candidates per proposal (or the whole space, when it is
    /// finite and no larger than this).
    pub candidate_pool_size: usize,
    pub local_search_steps: usize,
    /// Top random candidates refined by local search.
    pub local_search_starts: usize,
    pub batch_size: usize,
}

impl Default for AcquisitionConfig {
    fn default() -> Self {
        AcquisitionConfig {
            beta: BetaSchedule::Default,
            candidate_pool_size: 300,
            local_search_steps: 30,
            local_search_starts: 5,
            batch_size: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StructureSettings {
    /// `None` uses `M = #stages + 2` with symmetric `gamma = 1`.
    pub prior: Option<StructurePrior>,
    /// When false the initial decomposition is kept for the whole run.
    pub learn: bool,
    pub sweeps_per_iteration: usize,
    /// Split-merge moves after each sweep.
    pub split_merge_moves: usize,
    pub pool_capacity: usize,
    /// Best pool entries refitted to the current observations before the sweep.
    pub pool_refresh: usize,
    pub refit_restarts: usize,
    pub refit_max_iter: usize,
    /// Iterations of the single-restart fit for decompositions met in a sweep.
    pub quick_fit_max_iter: usize,
}

impl Default for StructureSettings {
    fn default() -> Self {
        StructureSettings {
            prior: None,
            learn: true,
            sweeps_per_iteration: 1,
            split_merge_moves: 3,
            pool_capacity: 50,
            pool_refresh: 3,
            refit_restarts: 3,
            refit_max_iter: 60,
            quick_fit_max_iter: 15,
        }
    }
}

/// Kernel inputs, targets and optional per-point extra noise.
pub type TrainingData = (Vec<GpInput>, Vec<f64>, Option<Vec<f64>>);

/// Starting point transferred from related runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Warmstart {
    pub prior: StructurePrior,
    pub params: KernelParams,
    pub initial_z: Decomposition,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunOptions {
    pub max_evaluations: usize,
    pub max_seconds: Option<f64>,
    pub acquisition: AcquisitionConfig,
    pub structure: StructureSettings,
    pub metric: Metric,
    pub folds: usize,
    pub dataset: String,
    pub time_budget_s: f64,
    /// Score recorded for failed or timed-out evaluations.
    pub failure_penalty: f64,
    /// Adds each observation's fold-score variance / J to the noise.
    pub heteroscedastic: bool,
    /// Random configurations evaluated before the first fit; `None` means `max(2B, 10)`.
    pub initial_design: Option<usize>,
    pub seed: u64,
    pub warmstart: Option<Warmstart>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            max_evaluations: 100,
            max_seconds: None,
            acquisition: AcquisitionConfig::default(),
            structure: StructureSettings::default(),
            metric: Metric::AucRoc,
            folds: 5,
            dataset: String::new(),
            time_budget_s: 3600.0,
            failure_penalty: 0.0,
            heteroscedastic: false,
            initial_design: None,
            seed: 0,
            warmstart: None,
        }
    }
}

impl RunOptions {
    pub fn initial_design_size(&self) -> usize {
        self.initial_design.unwrap_or((2 * self.acquisition.batch_size).max(10)).max(1)
    }

    pub fn validate(&self, space: &SearchSpace) -> Result<()> {
        let a = &self.acquisition;
        if self.max_evaluations == 0 {
            return Err(Error::InvalidConfig("budget must allow at least one evaluation".into()));
        }
        if a.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        if a.candidate_pool_size < a.batch_size {
            return Err(Error::InvalidConfig("candidate pool must be at least the batch size".into()));
        }
        if let BetaSchedule::Constant { value } = a.beta {
            if !(value >= 0.0 && value.is_finite()) {
                return Err(Error::InvalidConfig("beta must be finite and nonnegative".into()));
            }
        }
        if self.folds < 2 {
            return Err(Error::InvalidConfig("need at least 2 folds".into()));
        }
        if !(self.time_budget_s > 0.0) {
            return Err(Error::InvalidConfig("time budget per evaluation must be positive".into()));
        }
        if !self.failure_penalty.is_finite() {
            return Err(Error::InvalidConfig("failure penalty must be finite".into()));
        }
        if let Some(w) = &self.warmstart {
            w.initial_z.check_space(space)?;
            if w.initial_z.n_subspaces() != w.prior.m() {
                return Err(Error::InvalidConfig("warmstart decomposition and prior disagree on M".into()));
            }
            w.params.validate(w.prior.m(), space.n_hyperparams())?;
        }
        if let Some(p) = &self.structure.prior {
            if p.m() == 0 {
                return Err(Error::InvalidConfig("structure prior needs M >= 1".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub iteration: usize,
    pub request: EvaluationRequest,
    pub result: EvaluationResult,
    /// The value the surrogate sees: mean score, or the failure penalty.
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub acquisition: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchItem {
    pub config: PipelineConfig,
    pub ucb: f64,
    /// Global index of the prediction algorithm, when the space has that stage.
    pub prediction_algorithm: Option<usize>,
    pub subspace: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchProposal {
    pub items: Vec<BatchItem>,
    pub requested: usize,
    /// Distinct subspaces owning at least one prediction algorithm.
    pub prediction_bearing_subspaces: usize,
    pub n_prediction_algorithms: usize,
}

impl BatchProposal {
    /// Checks the diversity constraints; returns a description of the first violation.
    pub fn check_diversity(&self) -> std::result::Result<(), String> {
        let preds: Vec<usize> = self.items.iter().filter_map(|i| i.prediction_algorithm).collect();
        if preds.len() != self.items.len() {
            return Ok(());
        }
        let distinct: HashSet<usize> = preds.iter().copied().collect();
        if distinct.len() != preds.len() {
            return Err(format!("repeated prediction algorithm in {preds:?}"));
        }
        if self.prediction_bearing_subspaces >= self.items.len() {
            let subs: Vec<usize> = self.items.iter().filter_map(|i| i.subspace).collect();
            let distinct: HashSet<usize> = subs.iter().copied().collect();
            if distinct.len() != subs.len() {
                return Err(format!(
                    "repeated subspace in {subs:?} with {} available",
                    self.prediction_bearing_subspaces
                ));
            }
        }
        let expected = self.requested.min(self.n_prediction_algorithms.max(1));
        if self.items.len() > expected {
            return Err(format!("batch of {} exceeds feasible size {expected}", self.items.len()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub iteration: usize,
    pub proposal: BatchProposal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    /// Completed batches (the initial design counts as the first).
    pub iteration: usize,
    pub history: Vec<Observation>,
    pub batches: Vec<BatchRecord>,
    pub prior: StructurePrior,
    /// Current state of the Gibbs chain.
    pub chain: Decomposition,
    /// Highest-posterior decomposition in the pool, used by the surrogate.
    pub decomposition: Decomposition,
    pub params: KernelParams,
    /// Whether `params` have been fitted (or transferred) yet.
    pub fitted: bool,
    pub pool: SamplePool,
    pub param_cache: ParamCache,
    pub incumbent: Option<usize>,
}

impl RunState {
    pub fn incumbent(&self) -> Option<&Observation> {
        self.incumbent.map(|i| &self.history[i])
    }

    pub fn n_evaluations(&self) -> usize {
        self.history.len()
    }

    /// Best observed score after each evaluation.
    pub fn incumbent_trace(&self) -> Vec<f64> {
        let mut best = f64::NEG_INFINITY;
        self.history
            .iter()
            .map(|o| {
                best = best.max(o.score);
                best
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    BudgetExhausted,
    TimeLimit,
    Interrupted,
}

/// External stop requests, checked between iterations.
#[derive(Clone, Debug, Default)]
pub struct RunControl {
    pub interrupt: Arc<AtomicBool>,
    /// Stop once this many iterations have completed.
    pub stop_after: Option<usize>,
}

impl RunControl {
    fn should_stop(&self, iteration: usize) -> bool {
        self.interrupt.load(Ordering::SeqCst) || self.stop_after.is_some_and(|n| iteration >= n)
    }
}

/// Notified after every completed iteration, e.g. to persist progress.
pub trait RunObserver {
    fn on_iteration(&mut self, state: &RunState, new: &[Observation]) -> Result<()>;
}

impl RunObserver for () {
    fn on_iteration(&mut self, _: &RunState, _: &[Observation]) -> Result<()> {
        Ok(())
    }
}

pub struct Optimizer<'a> {
    space: &'a SearchSpace,
    layout: KernelLayout,
    evaluator: &'a dyn Evaluator,
    options: RunOptions,
    prediction_stage: Option<usize>,
}

impl<'a> Optimizer<'a> {
    pub fn new(space: &'a SearchSpace, evaluator: &'a dyn Evaluator, options: RunOptions) -> Result<Self> {
        options.validate(space)?;
        Ok(Optimizer {
            layout: KernelLayout::new(space),
            prediction_stage: space.stage_index(Stage::Prediction),
            space,
            evaluator,
            options,
        })
    }

    pub fn options(&self) -> &RunOptions {
        &self.options
    }

    pub fn space(&self) -> &SearchSpace {
        self.space
    }

    pub fn layout(&self) -> &KernelLayout {
        &self.layout
    }

    pub fn initial_state(&self) -> RunState {
        let h = self.space.n_hyperparams();
        let (prior, chain, params, fitted) = match &self.options.warmstart {
            Some(w) => (w.prior.clone(), w.initial_z.clone(), w.params.clone(), true),
            None => {
                let prior =
                    self.options.structure.prior.clone().unwrap_or_else(|| StructurePrior::default_for(self.space));
                let m = prior.m();
                (prior, Decomposition::stage_aligned(self.space, m), KernelParams::new(m, h), false)
            }
        };
        RunState {
            iteration: 0,
            history: Vec::new(),
            batches: Vec::new(),
            decomposition: chain.clone(),
            chain,
            prior,
            params,
            fitted,
            pool: SamplePool::new(self.options.structure.pool_capacity),
            param_cache: ParamCache::default(),
            incumbent: None,
        }
    }

    /// Runs until the budget is spent or a stop is requested. On a backend
    /// error the state keeps every completed iteration.
    pub fn run(
        &self,
        state: &mut RunState,
        control: &RunControl,
        observer: &mut dyn RunObserver,
    ) -> Result<StopReason> {
        let started = Instant::now();
        loop {
            if state.history.len() >= self.options.max_evaluations {
                return Ok(StopReason::BudgetExhausted);
            }
            if self.options.max_seconds.is_some_and(|s| started.elapsed().as_secs_f64() >= s) {
                return Ok(StopReason::TimeLimit);
            }
            if control.should_stop(state.iteration) {
                return Ok(StopReason::Interrupted);
            }
            let new = self.step(state)?;
            observer.on_iteration(state, &new)?;
        }
    }

    /// One iteration: evaluate a batch, then update structure and surrogate.
    pub fn step(&self, state: &mut RunState) -> Result<Vec<Observation>> {
        let t = state.iteration;
        let remaining = self.options.max_evaluations.saturating_sub(state.history.len());
        if remaining == 0 {
            return Ok(Vec::new());
        }
        let (configs, acquisition, batch) = if state.history.is_empty() {
            let n = self.options.initial_design_size().min(remaining);
            let mut r = rng::substream(self.options.seed, streams::DESIGN, 0);
            let configs: Vec<PipelineConfig> = (0..n).map(|_| self.space.sample_with(&mut r)).collect();
            (configs, vec![None; n], None)
        } else {
            let model = self.model(state)?;
            let mut proposal = self.propose_batch(state, &model, t)?;
            proposal.items.truncate(remaining);
            let configs = proposal.items.iter().map(|i| i.config.clone()).collect();
            let acq = proposal.items.iter().map(|i| Some(i.ucb)).collect();
            (configs, acq, Some(proposal))
        };

        let fold_seed = rng::derive_seed(self.options.seed, streams::FOLDS, 0);
        let requests: Vec<EvaluationRequest> = configs
            .into_iter()
            .enumerate()
            .map(|(k, config)| EvaluationRequest {
                request_id: format!("t{t:04}-{k:02}"),
                config,
                dataset: self.options.dataset.clone(),
                metric: self.options.metric,
                folds: self.options.folds,
                seed: fold_seed,
                time_budget_s: self.options.time_budget_s,
            })
            .collect();
        let results = self.dispatch(&requests)?;

        let mut new = Vec::with_capacity(requests.len());
        for ((request, mut result), acquisition) in requests.into_iter().zip(results).zip(acquisition) {
            if result.request_id != request.request_id {
                result =
                    EvaluationResult::failed(&request.request_id, EvalStatus::Failed, "result names another request");
            }
            let score = result.observed_score(self.options.failure_penalty);
            new.push(Observation { iteration: t, request, result, score, acquisition });
        }
        for o in &new {
            state.history.push(o.clone());
            let i = state.history.len() - 1;
            if state.incumbent.is_none_or(|b| state.history[b].score < o.score) {
                state.incumbent = Some(i);
            }
        }
        if let Some(proposal) = batch {
            state.batches.push(BatchRecord { iteration: t, proposal });
        }
        self.update_structure(state, t)?;
        state.iteration += 1;
        Ok(new)
    }

    fn dispatch(&self, requests: &[EvaluationRequest]) -> Result<Vec<EvaluationResult>> {
        let width = self.options.acquisition.batch_size.max(1);
        let mut out = Vec::with_capacity(requests.len());
        for chunk in requests.chunks(width) {
            if chunk.len() == 1 {
                out.push(self.evaluator.evaluate(&chunk[0])?);
                continue;
            }
            let results: Vec<Result<EvaluationResult>> = std::thread::scope(|s| {
                let handles: Vec<_> = chunk.iter().map(|r| s.spawn(move || self.evaluator.evaluate(r))).collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|_| Err(Error::Backend("evaluation thread panicked".into()))))
                    .collect()
            });
            for r in results {
                out.push(r?);
            }
        }
        Ok(out)
    }

    /// Kernel inputs, scores and (when heteroscedastic) per-point extra
    /// noise for the whole history.
    pub fn observations(&self, state: &RunState) -> Result<TrainingData> {
        let inputs = state
            .history
            .iter()
            .map(|o| self.layout.input(&self.space.encode(&o.request.config)?))
            .collect::<Result<Vec<_>>>()?;
        let y = state.history.iter().map(|o| o.score).collect();
        let extra = self
            .options
            .heteroscedastic
            .then(|| state.history.iter().map(|o| o.result.mean_variance().unwrap_or(0.0)).collect());
        Ok((inputs, y, extra))
    }

    /// The surrogate for the current MAP decomposition and parameters.
    pub fn model(&self, state: &RunState) -> Result<SurrogateModel> {
        let (inputs, y, extra) = self.observations(state)?;
        SurrogateModel::condition(
            self.layout.clone(),
            state.decomposition.clone(),
            state.params.clone(),
            inputs,
            y,
            extra,
        )
    }

    /// Gibbs sweep(s), pool update, MAP selection and a full refit.
    fn update_structure(&self, state: &mut RunState, t: usize) -> Result<()> {
        let (inputs, y, extra) = self.observations(state)?;
        let m = state.prior.m();
        let h = self.space.n_hyperparams();
        if !state.fitted {
            state.params = KernelParams::initial(m, h, &y);
        }
        let settings = &self.options.structure;
        let mut ctx = EvidenceContext::new(self.layout.clone(), inputs.clone(), y.clone());
        ctx.extra_noise = extra.clone();
        ctx.quick_fit = FitOptions { restarts: 1, max_iter: settings.quick_fit_max_iter };
        ctx.cache = std::mem::take(&mut state.param_cache);

        let mut gibbs_rng = rng::substream(self.options.seed, streams::GIBBS, t as u64);
        state.pool.rescore(&state.prior, &mut ctx, settings.pool_refresh, &mut gibbs_rng)?;
        if settings.learn && y.len() >= 2 {
            for _ in 0..settings.sweeps_per_iteration {
                state.chain = gibbs_sweep(&state.chain, &state.prior, self.space, &mut ctx, &mut gibbs_rng)?;
                for _ in 0..settings.split_merge_moves {
                    state.chain = split_merge(&state.chain, &state.prior, self.space, &mut ctx, &mut gibbs_rng)?.0;
                }
                self.add_to_pool(state, &mut ctx, &mut gibbs_rng)?;
            }
        }
        if state.pool.is_empty() {
            self.add_to_pool(state, &mut ctx, &mut gibbs_rng)?;
        }
        let map = state.pool.map_entry()?.clone();
        if y.len() >= 2 {
            let mut fit_rng = rng::substream(self.options.seed, streams::FIT, t as u64);
            let options = FitOptions { restarts: settings.refit_restarts, max_iter: settings.refit_max_iter };
            let fit = fit_params(
                &self.layout,
                &map.decomposition,
                &inputs,
                &y,
                extra.as_deref(),
                Some(&map.params),
                options,
                &mut fit_rng,
            )?;
            ctx.cache.insert(&map.decomposition, fit.params.clone(), y.len());
            let lp = fit.log_marginal_likelihood + state.prior.log_prior(&map.decomposition);
            state.pool.upsert(map.decomposition.clone(), lp, fit.params.clone())?;
            state.params = fit.params;
            state.fitted = true;
        } else {
            state.params = map.params.clone();
        }
        state.decomposition = map.decomposition;
        state.param_cache = ctx.cache;
        Ok(())
    }

    fn add_to_pool(&self, state: &mut RunState, ctx: &mut EvidenceContext, rng: &mut Rng) -> Result<()> {
        let lp = log_unnorm_posterior(&state.chain, &state.prior, ctx, rng)?;
        let params = ctx.cached_params(&state.chain).cloned().unwrap_or_else(|| state.params.clone());
        if lp.is_finite() {
            state.pool.upsert(state.chain.clone(), lp, params)?;
        }
        Ok(())
    }

    /// Candidate search and greedy diverse selection for iteration `t`.
    pub fn propose_batch(&self, state: &RunState, model: &SurrogateModel, t: usize) -> Result<BatchProposal> {
        let acq = &self.options.acquisition;
        let beta = acq.beta.beta(t.max(1), self.space.dimension());
        let mut r = rng::substream(self.options.seed, streams::ACQUISITION, t as u64);
        let search = Search { space: self.space, model, beta, z: &state.decomposition };
        let mut pool = CandidatePool::default();

        match self.space.enumerate(acq.candidate_pool_size) {
            Some(all) => {
                for c in all {
                    pool.add(search.score(c)?);
                }
            }
            None => {
                for _ in 0..acq.candidate_pool_size {
                    pool.add(search.score(self.space.sample_with(&mut r))?);
                }
            }
        }
        let pred_algs: Vec<usize> =
            self.prediction_stage.map(|s| self.space.stage_algorithms(s).collect()).unwrap_or_default();
        let per_pred = (acq.candidate_pool_size / (4 * pred_algs.len().max(1))).max(3);
        for &p in &pred_algs {
            for _ in 0..per_pred {
                let mut choices: Vec<usize> =
                    (0..self.space.n_stages()).map(|s| r.random_range(self.space.stage_algorithms(s))).collect();
                choices[self.prediction_stage.expect("prediction stage exists")] = p;
                pool.add(search.score(self.space.sample_with_choices(&choices, &mut r))?);
            }
        }

        // local-search starting points
        let mut starts: Vec<(Candidate, Option<usize>)> = Vec::new();
        for c in pool.top(acq.local_search_starts) {
            starts.push((c.clone(), None));
        }
        let mut observed: Vec<&Observation> = state.history.iter().collect();
        observed.sort_by(|a, b| b.score.total_cmp(&a.score));
        for o in observed.iter().take(3) {
            starts.push((search.score(o.request.config.clone())?, None));
        }
        if let Some(inc) = state.incumbent() {
            let inc = search.score(inc.request.config.clone())?;
            for m in 0..state.decomposition.n_subspaces() {
                if let Some(c) = search.component_search(m, &inc, acq.local_search_steps, &mut r)? {
                    starts.push((c, None));
                }
            }
        }
        if let Some(ps) = self.prediction_stage {
            for &p in &pred_algs {
                if let Some(c) = pool.best_with(|c| c.choices[ps] == p) {
                    starts.push((c.clone(), Some(ps)));
                }
            }
        }
        for (start, frozen) in starts {
            pool.add(start.clone());
            let refined = search.local_search(start, acq.local_search_steps, frozen, &mut r)?;
            pool.add(refined);
        }
        Ok(self.select(pool.into_sorted(), &state.decomposition, acq.batch_size))
    }

    fn select(&self, sorted: Vec<Candidate>, z: &Decomposition, batch_size: usize) -> BatchProposal {
        let Some(ps) = self.prediction_stage else {
            let items = sorted
                .into_iter()
                .take(batch_size)
                .map(|c| BatchItem { config: c.config, ucb: c.ucb, prediction_algorithm: None, subspace: None })
                .collect();
            return BatchProposal {
                items,
                requested: batch_size,
                prediction_bearing_subspaces: 0,
                n_prediction_algorithms: 0,
            };
        };
        let preds: Vec<usize> = self.space.stage_algorithms(ps).collect();
        let bearing: HashSet<usize> = preds.iter().map(|&p| z.get(p)).collect();
        let target = batch_size.min(preds.len());
        let mut used_pred = HashSet::new();
        let mut used_sub = HashSet::new();
        let mut taken = vec![false; sorted.len()];
        let mut picked: Vec<usize> = Vec::new();
        // distinct prediction algorithm and distinct subspace
        for (i, c) in sorted.iter().enumerate() {
            if picked.len() == target {
                break;
            }
            let p = c.choices[ps];
            if !used_pred.contains(&p) && !used_sub.contains(&z.get(p)) {
                used_pred.insert(p);
                used_sub.insert(z.get(p));
                taken[i] = true;
                picked.push(i);
            }
        }
        // fallback: distinct prediction algorithm only
        for (i, c) in sorted.iter().enumerate() {
            if picked.len() == target {
                break;
            }
            let p = c.choices[ps];
            if !taken[i] && !used_pred.contains(&p) {
                used_pred.insert(p);
                taken[i] = true;
                picked.push(i);
            }
        }
        let items = picked
            .into_iter()
            .map(|i| {
                let c = &sorted[i];
                let p = c.choices[ps];
                BatchItem {
                    config: c.config.clone(),
                    ucb: c.ucb,
                    prediction_algorithm: Some(p),
                    subspace: Some(z.get(p)),
                }
            })
            .collect();
        BatchProposal {
            items,
            requested: batch_size,
            prediction_bearing_subspaces: bearing.len(),
            n_prediction_algorithms: preds.len(),
        }
    }
}

#[derive(Clone, Debug)]
struct Candidate {
    config: PipelineConfig,
    choices: Vec<usize>,
    input: GpInput,
    ucb: f64,
}

/// Deduplicated candidates in insertion order.
#[derive(Default)]
struct CandidatePool {
    seen: HashSet<Vec<u64>>,
    items: Vec<Candidate>,
}

impl CandidatePool {
    fn key(c: &Candidate) -> Vec<u64> {
        c.input.choices.iter().map(|&g| g as u64).chain(c.input.x.iter().map(|v| v.to_bits())).collect()
    }

    fn add(&mut self, c: Candidate) {
        if self.seen.insert(Self::key(&c)) {
            self.items.push(c);
        }
    }

    fn top(&self, k: usize) -> Vec<&Candidate> {
        let mut idx: Vec<usize> = (0..self.items.len()).collect();
        idx.sort_by(|&a, &b| self.items[b].ucb.total_cmp(&self.items[a].ucb).then(a.cmp(&b)));
        idx.into_iter().take(k).map(|i| &self.items[i]).collect()
    }

    fn best_with(&self, pred: impl Fn(&Candidate) -> bool) -> Option<&Candidate> {
        self.items.iter().filter(|c| pred(c)).fold(None, |best: Option<&Candidate>, c| match best {
            Some(b) if b.ucb >= c.ucb => Some(b),
            _ => Some(c),
        })
    }

    /// Descending UCB, ties in insertion order.
    fn into_sorted(self) -> Vec<Candidate> {
        let mut items = self.items;
        items.sort_by(|a, b| b.ucb.total_cmp(&a.ucb));
        items
    }
}

/// A coordinate of a configuration that local search may change.
#[derive(Clone, Copy, Debug)]
enum Coordinate {
    Stage(usize),
    Param { stage: usize, index: usize },
}

struct Search<'s> {
    space: &'s SearchSpace,
    model: &'s SurrogateModel,
    beta: f64,
    z: &'s Decomposition,
}

impl Search<'_> {
    fn score(&self, config: PipelineConfig) -> Result<Candidate> {
        let point = self.space.encode(&config)?;
        let input = self.model.layout().input(&point)?;
        let ucb = ucb_input(self.model, &input, self.beta);
        Ok(Candidate { choices: input.choices.clone(), config, input, ucb })
    }

    fn component_ucb(&self, m: usize, input: &GpInput) -> Result<f64> {
        let (mean, var) = self.model.component_posterior(m, input)?;
        Ok(mean + self.beta.sqrt() * var.sqrt())
    }

    /// Coordinates that can change `choices`, optionally restricted to
    /// those owned by subspace `m` and excluding a frozen stage.
    fn coordinates(&self, choices: &[usize], owner: Option<usize>, frozen: Option<usize>) -> Vec<Coordinate> {
        let mut coords = Vec::new();
        for (s, &g) in choices.iter().enumerate() {
            if Some(s) == frozen {
                continue;
            }
            let options = self.space.stage_algorithms(s).filter(|&a| owner.is_none_or(|m| self.z.get(a) == m)).count();
            let current_counts = owner.is_none_or(|m| self.z.get(g) == m);
            if options > 1 || (options == 1 && !current_counts) {
                coords.push(Coordinate::Stage(s));
            }
        }
        for (s, &g) in choices.iter().enumerate() {
            if owner.is_none_or(|m| self.z.get(g) == m) {
                for index in 0..self.space.algorithm(g).hyperparams.len() {
                    coords.push(Coordinate::Param { stage: s, index });
                }
            }
        }
        coords
    }

    fn mutate(&self, c: &Candidate, coord: Coordinate, owner: Option<usize>, r: &mut Rng) -> PipelineConfig {
        let mut config = c.config.clone();
        match coord {
            Coordinate::Stage(s) => {
                let options: Vec<usize> = self
                    .space
                    .stage_algorithms(s)
                    .filter(|&a| a != c.choices[s] && owner.is_none_or(|m| self.z.get(a) == m))
                    .collect();
                if options.is_empty() {
                    return config;
                }
                let g = options[r.random_range(0..options.len())];
                let mut choices = c.choices.clone();
                choices[s] = g;
                let fresh = self.space.sample_with_choices(&choices, r);
                config.stages[s] = fresh.stages[s].clone();
            }
            Coordinate::Param { stage, index } => {
                let h = &self.space.algorithm(c.choices[stage]).hyperparams[index];
                let current = &config.stages[stage].params[&h.name];
                let value = match &h.kind {
                    ParamKind::Categorical { choices } => {
                        let cur = h.normalize(current) as usize;
                        if choices.len() < 2 {
                            return config;
                        }
                        let mut k = r.random_range(0..choices.len() - 1);
                        if k >= cur {
                            k += 1;
                        }
                        h.denormalize(k as f64)
                    }
                    _ => {
                        if r.random::<f64>() < 0.5 {
                            h.sample(r)
                        } else {
                            let step: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, r);
                            h.denormalize((h.normalize(current) + 0.15 * step).clamp(0.0, 1.0))
                        }
                    }
                };
                config.stages[stage].params.insert(h.name.clone(), value);
            }
        }
        config
    }

    /// Stochastic coordinate ascent on the full UCB.
    fn local_search(&self, start: Candidate, steps: usize, frozen: Option<usize>, r: &mut Rng) -> Result<Candidate> {
        let mut current = start;
        for _ in 0..steps {
            let coords = self.coordinates(&current.choices, None, frozen);
            if coords.is_empty() {
                break;
            }
            let coord = coords[r.random_range(0..coords.len())];
            let proposal = self.score(self.mutate(&current, coord, None, r))?;
            if proposal.ucb > current.ucb {
                current = proposal;
            }
        }
        Ok(current)
    }

    /// Maximizes one component's UCB over that subspace's coordinates,
    /// holding everything else at `start`.
    fn component_search(&self, m: usize, start: &Candidate, steps: usize, r: &mut Rng) -> Result<Option<Candidate>> {
        if (0..self.z.n_algorithms()).all(|g| self.z.get(g) != m) {
            return Ok(None);
        }
        let mut current = start.clone();
        let mut value = self.component_ucb(m, &current.input)?;
        for _ in 0..steps {
            let coords = self.coordinates(&current.choices, Some(m), None);
            if coords.is_empty() {
                break;
            }
            let coord = coords[r.random_range(0..coords.len())];
            let proposal = self.score(self.mutate(&current, coord, Some(m), r))?;
            let v = self.component_ucb(m, &proposal.input)?;
            if v > value {
                value = v;
                current = proposal;
            }
        }
        Ok(Some(current))
    }
}
