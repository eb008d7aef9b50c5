use chorlam::conform::*;
use chorlam::runtime::ExternTable;
use std::time::Instant;

fn main() {
    let externs = ExternTable::standard();
    let budget = CorrespondenceBudget::default();
    let mut totals = [0f64; 5];
    for seed in 0..5u64 {
        let cfg = GenConfig { seed, max_depth: 4, ..GenConfig::default() };
        let sample = gen_well_typed(&cfg);
        let checks: Vec<(&str, Box<dyn Fn() -> Verdict>)> = vec![
            ("progress", Box::new(|| check_progress_preservation(&sample, &externs, 32))),
            ("completeness", Box::new(|| check_completeness(&sample, &externs, &budget))),
            ("soundness", Box::new(|| check_soundness(&sample, &externs, &budget))),
            ("deadlock", Box::new(|| check_deadlock_freedom(&sample, &externs, &[0,1,2,3,4], 10000, 32))),
            ("onesynch", Box::new(|| check_onesynch(&sample, &externs, 8, 32, 100000))),
        ];
        for (i, (name, f)) in checks.iter().enumerate() {
            let t = Instant::now();
            let v = f();
            let dt = t.elapsed().as_secs_f64();
            totals[i] += dt;
            println!("seed {seed} {name}: {dt:.2}s {:?}", matches!(v, Verdict::Pass));
        }
    }
    println!("totals: {totals:?}");
}
