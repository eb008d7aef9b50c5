use chorlam::conform::*;
use chorlam::runtime::{self, ExternTable, RunEnv};
use chorlam::surface;

fn main() {
    let externs = ExternTable::standard();
    let cfg = GenConfig { seed: 1, max_depth: 4, ..GenConfig::default() };
    let sample = gen_well_typed(&cfg);
    println!("term: {}", surface::print_term(&sample.term));
    let env = RunEnv { defs: &sample.defs, externs: &externs };
    let graph = runtime::explore(&sample.term, &env, 32, 8, 500);
    println!("chor graph: {} states {} edges (truncated {})", graph.states.len(), graph.edges.len(), graph.truncated);
    let budget = CorrespondenceBudget::default();
    let v = check_soundness(&sample, &externs, &budget);
    println!("soundness: {v:?}");
}
