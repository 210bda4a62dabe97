use splitkit::{defaults_for, run_convergence_study, stage_cost_ratio, ProblemKind};

fn main() {
    for round in 0..5 {
        let cfg = defaults_for(ProblemKind::Schrodinger { grid_n: 128 });
        let table = run_convergence_study(&cfg).unwrap();
        let mut per_tau = Vec::new();
        for &tau in &table.config.taus {
            let (mut ms, mut steps) = (0.0, 0u64);
            for r in table.rows_for_tau(tau) {
                ms += r.runtime_ms;
                steps += r.steps;
            }
            per_tau.push(format!("{tau:.3}:{:.4}", ms / steps as f64));
        }
        println!(
            "round {round}: {} ratio {:.3}",
            per_tau.join(" "),
            stage_cost_ratio(&table).unwrap()
        );
    }
}
