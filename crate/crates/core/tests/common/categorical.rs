//! A fully categorical 84-pipeline space and a lookup-table objective.

use pipebo::bo::{ucb, Optimizer, RunControl, RunOptions};
use pipebo::gp::{random_params, SurrogateModel};
use pipebo::objective::{EvaluationRequest, EvaluationResult, Evaluator};
use pipebo::space::SearchSpace;
use pipebo::structure::Decomposition;
use pipebo::Result;
use rand::Rng as _;

/// 4 x 3 x 7 = 84 pipelines, every hyperparameter categorical.
pub const SPACE: &str = r#"
[[stages]]
stage = "imputation"
[[stages.algorithms]]
name = "mean_imputer"
[[stages.algorithms]]
name = "knn_imputer"
hyperparams = [{ name = "n_neighbors", kind = "categorical", choices = ["3", "5", "9"], default = "5" }]

[[stages]]
stage = "feature_processing"
[[stages.algorithms]]
name = "passthrough"
[[stages.algorithms]]
name = "scaler"
hyperparams = [{ name = "with_mean", kind = "categorical", choices = ["false", "true"], default = "true" }]

[[stages]]
stage = "prediction"
[[stages.algorithms]]
name = "logistic_regression"
hyperparams = [{ name = "penalty", kind = "categorical", choices = ["l1", "l2"], default = "l2" }]
[[stages.algorithms]]
name = "random_forest"
hyperparams = [{ name = "criterion", kind = "categorical", choices = ["gini", "entropy", "log_loss"], default = "gini" }]
[[stages.algorithms]]
name = "svm"
hyperparams = [{ name = "kernel", kind = "categorical", choices = ["rbf", "linear"], default = "rbf" }]
"#;

/// Scores each pipeline by a fixed pseudo-random draw keyed on its label.
pub struct Lookup;

impl Evaluator for Lookup {
    fn evaluate(&self, request: &EvaluationRequest) -> Result<EvaluationResult> {
        let v: f64 = pipebo::rng::substream(3, &request.config.label(), 0).random();
        EvaluationResult::ok(&request.request_id, vec![v; request.folds])
    }
}

/// Runs a short optimization, swaps in a random surrogate state and
/// returns the UCB of the top proposal next to the exhaustive maximum.
pub fn top_and_best_ucb(case: u64) -> (f64, f64) {
    let space = SearchSpace::from_toml(SPACE).unwrap();
    let all = space.enumerate(1000).unwrap();
    let options = RunOptions { max_evaluations: 14, seed: case, ..RunOptions::default() };
    let optimizer = Optimizer::new(&space, &Lookup, options).unwrap();
    let mut state = optimizer.initial_state();
    optimizer.run(&mut state, &RunControl::default(), &mut ()).unwrap();

    let mut r = super::rng(500 + case);
    let m = 1 + (case as usize % 4);
    state.decomposition = Decomposition::random(space.n_algorithms(), m, &mut r);
    let params = random_params(m, space.n_hyperparams(), &mut r);
    let (x, y, _) = optimizer.observations(&state).unwrap();
    let model =
        SurrogateModel::condition(optimizer.layout().clone(), state.decomposition.clone(), params, x, y, None).unwrap();

    let t = 1 + case as usize;
    let proposal = optimizer.propose_batch(&state, &model, t).unwrap();
    let beta = optimizer.options().acquisition.beta.beta(t, space.dimension());
    let best =
        all.iter().map(|c| ucb(&model, &space.encode(c).unwrap(), beta).unwrap()).fold(f64::NEG_INFINITY, f64::max);
    let top = ucb(&model, &space.encode(&proposal.items[0].config).unwrap(), beta).unwrap();
    (top, best)
}
