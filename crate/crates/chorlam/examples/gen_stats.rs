use chorlam::conform::*;
use chorlam::project::project_network;

fn main() {
    let mut projectable = 0;
    let n = 200;
    for seed in 0..n {
        let cfg = GenConfig { seed, max_depth: 4, ..GenConfig::default() };
        let sample = gen_well_typed(&cfg);
        if project_network(&sample.typed).is_ok() {
            projectable += 1;
        }
    }
    println!("projectable: {projectable}/{n}");
}
