//! Scratch: what does the second pass actually do to predictions?

use bclab::envs::{Env, ExpertStyle, NarrowGapParams, SplitKind};
use bclab::nets::{NetConfig, PolicyNet};
use bclab::objectives::{train, OptConfig, Variant, VariantKind};
use bclab::samplers::two_step_infer;

fn main() {
    let a: Vec<String> = std::env::args().collect();
    let sigma: f64 = a.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.02);
    let n_traj: usize = a.get(2).and_then(|s| s.parse().ok()).unwrap_or(32);
    let steps: usize = a.get(3).and_then(|s| s.parse().ok()).unwrap_or(12000);
    let t_star: f64 = a.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.9);

    let env = Env::NarrowGap2D(NarrowGapParams {
        gap_width: 0.05,
        target_radius: 0.035,
        horizon: 56,
        ..Default::default()
    });
    let ds = bclab::envs::gen_dataset(
        &env,
        ExpertStyle::NoisyDelayed { sigma, prob: 0.10, dur: 4 },
        n_traj,
        1000,
        0.8,
    )
    .unwrap();
    let net = PolicyNet::init(
        NetConfig { hidden: 64, depth: 3, seed: 5, ..Default::default() },
        env.obs_dim(),
        env.chunk_dim(),
    )
    .unwrap();
    let variant = Variant { t_star, ..Variant::new(VariantKind::Mip) };
    let cfg = OptConfig { steps, seed: 9, ..Default::default() };
    let out = train(&variant, net, &ds.pairs(SplitKind::Train), &cfg).unwrap();
    let val = ds.pairs(SplitKind::Validation);

    let (mut e1, mut e2, mut drift) = (0.0, 0.0, 0.0);
    for i in 0..val.len() {
        let o = &val.obs[i];
        let a_true = &val.acts[i];
        let a1 = out.net.forward(o, &vec![0.0; 16], 0.0).unwrap();
        let a2 = two_step_infer(&out.net, VariantKind::Mip, o, t_star, None).unwrap();
        let d =
            |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        e1 += d(&a1, a_true);
        e2 += d(&a2, a_true);
        drift += d(&a1, &a2);
    }
    let n = val.len() as f64;
    println!(
        "val n={}  stage1 err {:.3}  stage2 err {:.3}  |a2-a1| {:.3}",
        val.len(),
        e1 / n,
        e2 / n,
        drift / n
    );

    // the same comparison at off-data states (interpolated between
    // validation observations)
    let (mut p1, mut p2) = (0.0, 0.0);
    let mut cnt = 0.0;
    for i in 1..val.len() {
        let o: Vec<f64> = val.obs[i]
            .iter()
            .zip(val.obs[i - 1].iter())
            .map(|(x, y)| 0.5 * (x + y))
            .collect();
        // nearest validation action as a crude reference
        let a_ref = &val.acts[i];
        let a1 = out.net.forward(&o, &vec![0.0; 16], 0.0).unwrap();
        let a2 = two_step_infer(&out.net, VariantKind::Mip, &o, t_star, None).unwrap();
        let d =
            |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt();
        p1 += d(&a1, a_ref);
        p2 += d(&a2, a_ref);
        cnt += 1.0;
    }
    println!("midpoint states: stage1 ref-dist {:.3}  stage2 ref-dist {:.3}", p1 / cnt, p2 / cnt);
}
