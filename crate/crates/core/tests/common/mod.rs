#![allow(dead_code)]

use coalfake::pipeline::{HumanMode, Pipeline, RunConfig, RunState};

/// A scaled-down benchmark that runs a round in well under a second.
pub fn tiny(seed: u64) -> RunConfig {
    let mut c = RunConfig::synth_benchmark(seed);
    c.corpus.synth.as_mut().unwrap().sizes = vec![300, 300, 60];
    c.sampling.per_round = 40;
    c.model.epochs = 12;
    c.stop.max_rounds = 3;
    c
}

pub fn interactive(seed: u64) -> RunConfig {
    let mut c = tiny(seed);
    c.human.mode = HumanMode::Interactive;
    c.annotator.rho = 0.5;
    c
}

pub fn finished(config: RunConfig) -> (Pipeline, RunState) {
    let p = Pipeline::new(config).unwrap();
    let mut s = p.init_state();
    p.run(&mut s, None).unwrap();
    (p, s)
}
