//! Scratch diagnostic: dump the trained AWAC policy/Q against the exact
//! fixed point on the same oracle reward.

use ipl::data::SegmentDiscount;
use ipl::harness::gridworld_fixture;
use ipl::ipl::{train_ipl, Backbone, IplConfig, StateActionCounts, Variant};
use ipl::mdp::make_gridworld;
use ipl::oracle::{build_design, oracle_policy_for_variant, solve_rstar};

fn main() -> ipl::Result<()> {
    let mdp = make_gridworld(5, 5, 24, 0.05, 0.0, 0.95, 0)?;
    let (dataset, offline) = gridworld_fixture(&mdp, 2000, 25, 31)?;
    let config = IplConfig {
        variant: Variant::Awac,
        backbone: Backbone::Tabular,
        lambda: 0.5,
        beta: 10.0,
        gamma: 0.95,
        k: 25,
        s: 16,
        pref_batch_size: 32,
        offline_batch_size: 256,
        q_lr: 3e-3,
        lr_final_fraction: 1e-2,
        total_steps: 40_000,
        eval_interval: 2000,
        // regularize_full_space stays off: support mode

        awac_policy_rate: 0.005,
        seed: 3,
        ..IplConfig::default()
    };
    let artifacts = train_ipl(&config, &dataset, &offline, &mdp)?;
    {
        use ipl::ipl::{implicit_reward_table, ValueTarget};
        let vt = ValueTarget::FromPolicy { q: &artifacts.q, policy: &artifacts.policy };
        let rq = implicit_reward_table(&artifacts.q, &vt, 0.95, &mdp);
        let v_goal: f64 = (0..4).map(|a| artifacts.policy.prob(24, a)
            * artifacts.q.forward(&ipl::approx::Input::StateAction(24, a))).sum();
        println!("trained r_Q(23,.) = {:?}", (0..4).map(|a| (rq[(23,a)]*1000.0).round()/1000.0).collect::<Vec<_>>());
        println!("trained r_Q(24,.) = {:?}", (0..4).map(|a| (rq[(24,a)]*1000.0).round()/1000.0).collect::<Vec<_>>());
        println!("trained r_Q(19,.) = {:?}", (0..4).map(|a| (rq[(19,a)]*1000.0).round()/1000.0).collect::<Vec<_>>());
        println!("trained V(goal) = {v_goal:.3}");
        for s in [23usize, 19, 18, 22, 24] {
            let q_row: Vec<String> = (0..4).map(|a| format!("{:+.3}", artifacts.q.forward(&ipl::approx::Input::StateAction(s, a)))).collect();
            let p_row: Vec<String> = (0..4).map(|a| format!("{:.3}", artifacts.policy.prob(s, a))).collect();
            println!("  s={s} Q [{}] pi [{}]", q_row.join(" "), p_row.join(" "));
        }
        let ret = ipl::mdp::evaluate_policy_return(&mdp, &artifacts.policy, &mdp.expert_reward_table())?;
        println!("trained return {ret:.4}");
    }
    let design = build_design(&dataset.pairs, 25, 4, SegmentDiscount::Off)?;
    let report = solve_rstar(&design, 0.5, 100)?;
    let counts = StateActionCounts::from_data(&dataset.pairs, &offline.transitions, 25, 4);
    let exact = oracle_policy_for_variant(&mdp, &report.rstar, &config, &counts)?;

    println!("state | trained Q row / exact Q row | trained pi / exact pi (greedy marked)");
    for s in [0, 6, 12, 18, 23, 19] {
        let tq: Vec<String> = (0..4)
            .map(|a| format!("{:+.3}", artifacts.q.forward(&ipl::approx::Input::StateAction(s, a))))
            .collect();
        let eq: Vec<String> = (0..4).map(|a| format!("{:+.3}", exact.q[(s, a)])).collect();
        let tp: Vec<String> = (0..4).map(|a| format!("{:.2}", artifacts.policy.prob(s, a))).collect();
        let ep: Vec<String> = (0..4).map(|a| format!("{:.2}", exact.policy.prob(s, a))).collect();
        println!("{s:>3} Q [{}] vs [{}]", tq.join(" "), eq.join(" "));
        println!("    pi [{}] vs [{}]", tp.join(" "), ep.join(" "));
    }
    Ok(())
}
