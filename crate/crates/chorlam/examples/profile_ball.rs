use chorlam::runtime::*;
use chorlam::surface;
use chorlam::typecheck;
use std::time::Instant;

fn main() {
    for name in ["diffie_hellman", "eap"] {
        let path = format!("{}/corpus/{}.chor", env!("CARGO_MANIFEST_DIR"), name);
        let sf = surface::parse(&std::fs::read_to_string(path).unwrap()).unwrap();
        let prog = typecheck::check_program(&sf).unwrap();
        let main = prog.main.unwrap();
        let externs = ExternTable::standard();
        let env = RunEnv { defs: &prog.defs, externs: &externs };
        for depth in [2, 4, 6] {
            let t = Instant::now();
            let g = explore(&main.node, &env, 32, depth, 500);
            println!("{name} depth {depth}: {} states {} edges (trunc {}) {:.2}s",
                g.states.len(), g.edges.len(), g.truncated, t.elapsed().as_secs_f64());
        }
    }
}
