#![allow(dead_code)]

pub mod categorical;
pub mod family;
pub mod oracles;
pub mod rules;
pub mod scenarios;

use pipebo::gp::{GpInput, KernelLayout};
use pipebo::rng::{self, Rng};
use pipebo::space::{PipelineConfig, SearchSpace};
use rand::Rng as _;

pub fn random_configs(space: &SearchSpace, n: usize, r: &mut Rng) -> Vec<PipelineConfig> {
    (0..n).map(|_| space.sample_with(r)).collect()
}

pub fn inputs(space: &SearchSpace, configs: &[PipelineConfig]) -> Vec<GpInput> {
    let layout = KernelLayout::new(space);
    configs.iter().map(|c| layout.input(&space.encode(c).unwrap()).unwrap()).collect()
}

pub fn rng(seed: u64) -> Rng {
    rng::substream(seed, "test", 0)
}

pub fn uniform(r: &mut Rng) -> f64 {
    r.random::<f64>()
}

/// Tabular dataset standing in for member `k` of a family of related
/// tasks: size, missingness and class balance drift with `k`.
pub fn family_dataset(k: usize) -> pipebo::data::Dataset {
    use pipebo::data::{Column, Dataset, Table};
    let mut r = rng(9000 + k as u64);
    let n = 200 + 40 * k;
    let p = 6;
    let mut names: Vec<String> = (0..p).map(|j| format!("x{j}")).collect();
    let mut cols: Vec<Column> = Vec::new();
    for j in 0..p {
        let missing = 0.02 * k as f64 * (j % 2) as f64;
        cols.push(Column::Numeric(
            (0..n)
                .map(|_| (r.random::<f64>() >= missing).then(|| r.random::<f64>().powf(1.0 + 0.3 * (j + k) as f64)))
                .collect(),
        ));
    }
    let positive = 0.5 - 0.06 * k as f64;
    names.push("label".into());
    cols.push(Column::Numeric((0..n).map(|_| Some((r.random::<f64>() < positive) as u8 as f64)).collect()));
    Dataset::from_table(&Table::new(names, cols).unwrap(), "label", None).unwrap()
}
