// temp diagnostic
use ropf::bench::{run_instance, RunConfig};
use ropf::formulation::RelaxationMode;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ROPF_LOG", "warn")).init();
    for (name, path) in [
        ("nesta_case3_lmbd", "crates/ropf/fixtures/nesta_case3_lmbd.m"),
        ("nesta_case5_pjm", "crates/ropf/fixtures/nesta_case5_pjm.m"),
    ] {
        let text = std::fs::read_to_string(path).unwrap();
        let mut cfg = RunConfig::new(name, text.clone());
        cfg.mode = RelaxationMode::MisocpaPlus;
        match run_instance(&cfg) {
            Ok(row) => println!(
                "{name}: lb={:.2?} ub={:.2?} gap={:.3?} nodes={} cuts={} time={:.2}s rec={}",
                row.lb, row.ub, row.gap_percent, row.nodes, row.cuts, row.time_s, row.recovery
            ),
            Err(e) => println!("{name}: ERROR {e}"),
        }
    }
}
