//! Train tabular IPL on exhaustive noiseless preferences and compare the
//! final implicit reward and extracted policy against the convex oracle:
//! the unique regularized minimizer r* and the variant-matched optimal
//! policy for it.
//!
//!     cargo run --release --example theorem_oracle

use ipl::data::SegmentDiscount;
use ipl::harness::exhaustive_k1_fixture;
use ipl::ipl::{Backbone, IplConfig, StateActionCounts, Trainer, Variant};
use ipl::mdp::make_random_mdp;
use ipl::oracle::{build_design, compare_to_oracle, oracle_policy_for_variant, solve_rstar};

fn main() -> ipl::Result<()> {
    let seed = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0u64);
    let mdp = make_random_mdp(5, 3, 0.9, 5, 1.0, seed)?;
    let (dataset, offline) = exhaustive_k1_fixture(&mdp, seed.wrapping_add(77))?;
    println!(
        "instance seed {seed}: {} exhaustive pairs over {} state-actions",
        dataset.pairs.len(),
        mdp.n_states() * mdp.n_actions()
    );

    let config = IplConfig {
        variant: Variant::Iql,
        backbone: Backbone::Tabular,
        lambda: 0.5,
        gamma: mdp.discount(),
        k: 1,
        s: 1,
        pref_batch_size: dataset.pairs.len(),
        offline_batch_size: offline.transitions.len(),
        q_lr: 0.03,
        v_lr: 0.03,
        lr_final_fraction: 1e-4,
        total_steps: 30_000,
        eval_interval: 3000,
        regularize_full_space: true,
        seed,
        ..IplConfig::default()
    };

    // Oracle side: Newton on the strictly convex objective, then the exact
    // fixed point of the same value scheme the trainer uses.
    let design = build_design(&dataset.pairs, mdp.n_states(), mdp.n_actions(), SegmentDiscount::Off)?;
    let report = solve_rstar(&design, config.lambda, mdp.n_states() * mdp.n_actions())?;
    println!(
        "oracle: {} Newton iterations, grad sup-norm {:.2e}, min Hessian eig {:.4e} (bound {:.4e})",
        report.iterations,
        report.grad_sup_norm,
        report.hessian_min_eig,
        2.0 * config.lambda / 15.0
    );

    let mut trainer = Trainer::new(config.clone(), &dataset, &offline, &mdp)?;
    trainer.attach_oracle_reward(report.rstar.clone());
    let artifacts = trainer.run()?;
    for row in artifacts.metrics.rows() {
        println!(
            "step {:>6}: pref_loss {:.6} reg {:.4} gap {:.3e} return {:.4}",
            row.step,
            row.pref_loss,
            row.reg_value,
            row.oracle_reward_gap.unwrap_or(f64::NAN),
            row.gt_return
        );
    }

    let counts = StateActionCounts::from_data(
        &dataset.pairs,
        &offline.transitions,
        mdp.n_states(),
        mdp.n_actions(),
    );
    let oracle_policy = oracle_policy_for_variant(&mdp, &report.rstar, &config, &counts)?;
    let gaps = compare_to_oracle(&artifacts, &report, &oracle_policy, &mdp, &counts)?;
    println!(
        "final gaps: sup|T*Q - r*| = {:.3e}, max KL = {:.3e}, |return diff| = {:.3e}",
        gaps.reward_gap_sup, gaps.max_state_kl, gaps.return_gap_abs
    );
    Ok(())
}
