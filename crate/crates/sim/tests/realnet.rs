// SPDX-License-Identifier: Apache-2.0

use std::time::Duration;

use fedcrypt_core::protocol::Protocol;
use fedcrypt_node::JobStatus;
use fedcrypt_sim::realnet::run_real;
use fedcrypt_sim::runner::run_scenario;
use fedcrypt_sim::scenario::{FailureEvent, Scenario, Workload};

#[test]
fn sockets_match_the_simulated_network() {
    for protocol in Protocol::ALL {
        let mut s = Scenario::new(3, protocol, 4);
        s.rounds = 3;
        s.workload = Workload::Linear {
            samples_per_party: 8,
            learning_rate: 0.05,
        };
        let real = run_real(&s, Duration::from_secs(120)).unwrap();
        assert_eq!(real.status, JobStatus::Completed);
        assert_eq!(real.completed_rounds, 3);
        assert_eq!(real.rows.len(), 3);
        assert!(real.frames > 0);
        let simulated = run_scenario(&s).unwrap();
        assert_eq!(real.parameters, simulated.parameters, "{protocol}");
    }
}

#[test]
fn failure_plans_need_the_simulator() {
    let mut s = Scenario::new(3, Protocol::Ring, 2);
    s.failure_plan.push(FailureEvent {
        round: 1,
        rank: 1,
        fail_at_step: 0,
        reconnect_after_s: None,
    });
    assert!(run_real(&s, Duration::from_secs(5)).is_err());
}
