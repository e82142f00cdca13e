//! Scratch flow-training diagnostics on the gap task.

use bclab::envs::{eval_policy, Env, ExpertStyle, NarrowGapParams, NetPolicy, SplitKind};
use bclab::metrics::validation_loss;
use bclab::nets::{NetConfig, PolicyNet, TimeEmbedding};
use bclab::objectives::{train, LossNorm, OptConfig, Variant, VariantKind};
use bclab::samplers::SamplerConfig;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(8000);
    let hidden: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(96);
    let sinus: bool = args.get(3).map(|s| s == "sin").unwrap_or(false);
    let lr: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1e-3);

    let env = Env::NarrowGap2D(NarrowGapParams { gap_width: 0.03, ..Default::default() });
    let ds = bclab::envs::gen_dataset(
        &env,
        ExpertStyle::NoisyDelayed { sigma: 0.03, prob: 0.10, dur: 4 },
        200,
        1000,
        0.9,
    )
    .unwrap();
    let t_embedding = if sinus { TimeEmbedding::Sinusoidal(4) } else { TimeEmbedding::RawScalar };
    let net = PolicyNet::init(
        NetConfig { hidden, depth: 3, t_embedding, seed: 5, ..Default::default() },
        env.obs_dim(),
        env.chunk_dim(),
    )
    .unwrap();
    let cfg = OptConfig { steps, lr, n_checkpoints: 5, seed: 9, ..Default::default() };
    let out = train(&Variant::new(VariantKind::Flow), net, &ds.pairs(SplitKind::Train), &cfg).unwrap();
    println!("loss head {:.4} tail {:.4}",
        out.loss_curve[..200.min(out.loss_curve.len())].iter().sum::<f64>() / 200.0,
        out.loss_curve[out.loss_curve.len()-200..].iter().sum::<f64>() / 200.0);
    for (step, net) in &out.checkpoints {
        let mut line = format!("ckpt {step}: ");
        for nfe in [1usize, 3, 9, 33] {
            let policy = NetPolicy {
                net,
                kind: VariantKind::Flow,
                sampler: SamplerConfig::deterministic(nfe),
                stats: &ds.stats,
            };
            let r = eval_policy(&env, &policy, 100, 77, None).unwrap();
            line.push_str(&format!("nfe{nfe}={:.2} ", r.success_rate));
        }
        let val = validation_loss(net, VariantKind::Flow, &ds.pairs(SplitKind::Validation), LossNorm::L2, 0.9, 9).unwrap();
        line.push_str(&format!("val={val:.2}"));
        println!("{line}");
    }
}
