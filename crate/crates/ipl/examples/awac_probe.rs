//! Scratch diagnostic: quality of the AWAC fixed point on the oracle reward
//! for the gridworld fixture, across beta values. Not part of the examples
//! tour; used to pin the variant-parity configuration.

use ipl::data::SegmentDiscount;
use ipl::harness::{gridworld_fixture, soft_optimal_return};
use ipl::ipl::{IplConfig, StateActionCounts, Variant};
use ipl::mdp::{evaluate_policy_return, make_gridworld};
use ipl::oracle::{build_design, oracle_policy_for_variant, solve_rstar};

fn main() -> ipl::Result<()> {
    let mdp = make_gridworld(5, 5, 24, 0.0, 0.0, 0.95, 0)?;
    let target = soft_optimal_return(&mdp, 0.1)?;
    let (dataset, offline) = gridworld_fixture(&mdp, 2000, 25, 31)?;
    let design = build_design(&dataset.pairs, 25, 4, SegmentDiscount::Off)?;
    let report = solve_rstar(&design, 0.5, 100)?;
    let counts = StateActionCounts::from_data(&dataset.pairs, &offline.transitions, 25, 4);
    println!("soft-optimal {target:.4}");
    for beta in [2.0, 4.0, 6.0, 10.0, 20.0] {
        for variant in [Variant::Iql, Variant::Awac] {
            let config = IplConfig {
                variant,
                beta,
                tau: 0.8,
                gamma: 0.95,
                ..IplConfig::default()
            };
            match oracle_policy_for_variant(&mdp, &report.rstar, &config, &counts) {
                Ok(result) => {
                    let ret = evaluate_policy_return(&mdp, &result.policy, &mdp.expert_reward_table())?;
                    println!(
                        "beta {beta:>5} {variant}: fixed-point return {ret:.4} ({:.1}%)",
                        100.0 * ret / target
                    );
                }
                Err(e) => println!("beta {beta:>5} {variant}: {e}"),
            }
        }
    }
    Ok(())
}
