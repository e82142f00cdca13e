//! Scratch parameter sweep for the precision-task separation.

use bclab::envs::{Env, ExpertStyle, NarrowGapParams};
use bclab::experiments::{mean_last_k, nfe_study, run_grid, Plan};
use bclab::nets::{NetConfig, TimeEmbedding};
use bclab::objectives::{OptConfig, Variant, VariantKind};

fn arg<T: std::str::FromStr>(args: &[String], i: usize, d: T) -> T {
    args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d)
}

fn main() {
    let a: Vec<String> = std::env::args().collect();
    let w: f64 = arg(&a, 1, 0.1);
    let sigma: f64 = arg(&a, 2, 0.02);
    let delay_prob: f64 = arg(&a, 3, 0.12);
    let delay_dur: usize = arg(&a, 4, 5);
    let horizon: usize = arg(&a, 5, 32);
    let a_max: f64 = arg(&a, 6, 0.1);
    let target_radius: f64 = arg(&a, 7, 0.04);
    let steps: usize = arg(&a, 8, 6000);
    let n_traj: usize = arg(&a, 9, 200);
    let hidden: usize = arg(&a, 10, 96);
    let mixed: bool = a.get(11).map(|s| s == "mixed").unwrap_or(false);
    let chunk: usize = arg(&a, 12, 8);
    let t_star: f64 = arg(&a, 13, 0.9);
    let sin_k: usize = arg(&a, 14, 0);
    let t_embedding = if sin_k > 0 { TimeEmbedding::Sinusoidal(sin_k) } else { TimeEmbedding::RawScalar };

    let env = Env::NarrowGap2D(NarrowGapParams {
        gap_width: w,
        a_max,
        target_radius,
        horizon,
        chunk,
        ..NarrowGapParams::default()
    });
    let tag = format!(
        "w{w}_s{sigma}_p{delay_prob}_u{delay_dur}_h{horizon}_a{a_max}_r{target_radius}_t{steps}_n{n_traj}_hd{hidden}_c{chunk}_ts{t_star}_k{sin_k}"
    );
    let styles = if mixed {
        vec![
            ExpertStyle::Noisy { sigma },
            ExpertStyle::Delayed { prob: delay_prob, dur: delay_dur },
        ]
    } else {
        vec![ExpertStyle::NoisyDelayed { sigma, prob: delay_prob, dur: delay_dur }]
    };
    let plan = Plan {
        name: format!("tune_{tag}{}", if mixed { "_mixed" } else { "" }),
        env,
        styles,
        n_traj,
        data_seed: 1000,
        train_fraction: 0.9,
        variants: [
            VariantKind::Regression,
            VariantKind::Flow,
            VariantKind::StraightFlow,
            VariantKind::Mip,
            VariantKind::Rr,
        ]
        .into_iter()
        .map(|k| Variant { t_star, ..Variant::new(k) })
        .collect(),
        seeds: vec![0, 1, 2],
        net: NetConfig { hidden, depth: 3, t_embedding, ..NetConfig::default() },
        opt: OptConfig { steps, ..OptConfig::default() },
        eval_episodes: 100,
        eval_seed: 77,
        execute_horizon: None,
        flow_nfe: 9,
        metrics: vec!["val_l2".into(), "off_manifold_l2".into()],
        base_seed: 42,
        out_dir: std::env::temp_dir().join(format!("bclab_tune_{tag}{}", if mixed { "_mixed" } else { "" })),
    };
    let start = std::time::Instant::now();
    let rows = run_grid(&plan).unwrap();
    let nfe_rows = nfe_study(&plan, None).unwrap();
    println!("grid+nfe done in {:.1}s", start.elapsed().as_secs_f64());
    println!(
        "{:<14} {:>7} {:>8} {:>9} | nfe success",
        "variant", "mean5", "val_l2", "offman_l2"
    );
    for v in ["regression", "flow", "straight_flow", "mip", "rr"] {
        let m5 = mean_last_k(&rows, v, "success_rate", 5).unwrap_or(f64::NAN);
        let val = mean_last_k(&rows, v, "val_l2", 1).unwrap_or(f64::NAN);
        let om = mean_last_k(&rows, v, "off_manifold_l2", 1).unwrap_or(f64::NAN);
        let mut nfe_str = String::new();
        for nfe in [1usize, 2, 3, 9] {
            if let Some(x) = mean_last_k(&nfe_rows, v, &format!("success_rate_nfe{nfe}"), 5) {
                nfe_str.push_str(&format!("@{nfe}={x:.2} "));
            }
        }
        println!("{v:<14} {m5:>7.3} {val:>8.3} {om:>9.3} | {nfe_str}");
    }
}
