//! Train all three IPL variants (XQL, IQL, AWAC) on a scripted-preference
//! gridworld and report each one's ground-truth return against the
//! soft-optimal target.
//!
//!     cargo run --release --example variant_parity [n_pairs] [seed]

use ipl::harness::{gridworld_fixture, soft_optimal_return};
use ipl::ipl::{train_ipl, Backbone, IplConfig, Variant};
use ipl::mdp::make_gridworld;

fn main() -> ipl::Result<()> {
    let n_pairs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let seed = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(0u64);
    let mdp = make_gridworld(5, 5, 24, 0.05, 0.0, 0.95, 0)?;
    let target = soft_optimal_return(&mdp, 0.1)?;
    println!("5x5 gridworld, {n_pairs} preferences, seed {seed}; soft-optimal return {target:.4}");

    let (dataset, offline) = gridworld_fixture(&mdp, n_pairs, 25, seed.wrapping_add(31))?;
    for variant in [Variant::Xql, Variant::Iql, Variant::Awac] {
        let config = IplConfig {
            variant,
            backbone: Backbone::Tabular,
            lambda: 0.5,
            alpha: 0.5,
            beta: 10.0,
            tau: 0.8,
            gamma: mdp.discount(),
            k: 25,
            s: 16,
            pref_batch_size: 32,
            offline_batch_size: 256,
            q_lr: 3e-3,
            v_lr: 3e-3,
            lr_final_fraction: 1e-2,
            total_steps: 40_000,
            eval_interval: 1000,
            awac_policy_rate: 0.005,
            seed,
            ..IplConfig::default()
        };
        let start = std::time::Instant::now();
        let artifacts = train_ipl(&config, &dataset, &offline, &mdp)?;
        if std::env::var("IPL_CURVES").is_ok() {
            for row in artifacts.metrics.rows() {
                println!(
                    "  {} step {:>6} return {:.4} pref {:.4} mean|rq| {:.3} max|rq| {:.3} vloss {:.5}",
                    variant, row.step, row.gt_return, row.pref_loss,
                    row.mean_abs_implicit_reward, row.max_abs_implicit_reward, row.value_loss
                );
            }
        }
        let ret = artifacts.metrics.last().unwrap().gt_return;
        println!(
            "{:<4} final return {:.4} ({:.1}% of soft-optimal) in {:.1}s",
            variant.to_string(),
            ret,
            100.0 * ret / target,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
