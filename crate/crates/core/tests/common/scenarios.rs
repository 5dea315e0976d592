//! Small fixed settings reused across test targets.

use nalgebra::DMatrix;
use pipebo::ensemble::argmax_probabilities;
use pipebo::gp::{KernelLayout, KernelParams, SurrogateModel};
use pipebo::space::{ParamValue, PipelineConfig, SearchSpace, Stage, StageChoice};

pub fn pipeline(space: &SearchSpace, algorithms: [&str; 3], c: f64) -> PipelineConfig {
    let stages = [Stage::Imputation, Stage::FeatureProcessing, Stage::Prediction];
    let mut config = PipelineConfig {
        stages: stages
            .iter()
            .zip(algorithms)
            .map(|(&stage, name)| StageChoice { stage, algorithm: name.to_string(), params: Default::default() })
            .collect(),
    };
    let choices = space.choice_indices(&config).unwrap();
    config = space.default_config(&choices);
    if algorithms[2] == "logistic_regression" {
        config.stages[2].params.insert("C".into(), ParamValue::Real(c));
    }
    space.validate(&config).unwrap()
}

fn correlation(cov: &DMatrix<f64>, i: usize, j: usize) -> f64 {
    cov[(i, j)] / (cov[(i, i)] * cov[(j, j)]).sqrt()
}

pub struct NearDuplicates {
    pub corr_pair: f64,
    pub corr_other: f64,
    /// Argmax mass of the duplicate pair under the joint posterior.
    pub pair_full: f64,
    /// The same with covariances dropped.
    pub pair_independent: f64,
}

/// Two pipelines differing only in a tiny `C` change, plus one sharing no
/// subspace with them, all with equal prior means.
pub fn near_duplicates(samples: usize) -> NearDuplicates {
    let space = SearchSpace::miniature();
    let layout = KernelLayout::new(&space);
    let z = pipebo::benchmark::standard_partition(&space);
    let mut params = KernelParams::new(3, space.n_hyperparams());
    params.rho = vec![0.0; 3];
    // neither pipeline uses the third subspace, so it would add a shared
    // constant to both
    params.signal_variance[2] = 1e-9;
    let a = pipeline(&space, ["mean_imputer", "pca", "logistic_regression"], 1.0);
    let b = pipeline(&space, ["mean_imputer", "pca", "logistic_regression"], 1.001);
    let c = pipeline(&space, ["knn_imputer", "select_k_best", "random_forest"], 1.0);
    let queries = super::inputs(&space, &[a, b, c]);
    let model = SurrogateModel::condition(layout, z, params, Vec::new(), Vec::new(), None).unwrap();
    let (mean, cov) = model.joint_posterior(&queries);
    let full = argmax_probabilities(mean.clone(), cov.clone(), samples, &mut super::rng(1)).unwrap();
    let diagonal = DMatrix::from_diagonal(&cov.diagonal());
    let independent = argmax_probabilities(mean, diagonal, samples, &mut super::rng(2)).unwrap();
    NearDuplicates {
        corr_pair: correlation(&cov, 0, 1),
        corr_other: correlation(&cov, 0, 2),
        pair_full: full[0] + full[1],
        pair_independent: independent[0] + independent[1],
    }
}
