// SPDX-License-Identifier: Apache-2.0

mod common;

use common::{config, job_id, Cluster};
use fedcrypt_core::protocol::Protocol;
use fedcrypt_node::config::{ConfigError, LearnerConfig, Role};
use fedcrypt_node::model::{
    centralized_descent, gradient, local_aggregate, loss, Batch, DomainWeighting, GradientSource, LinearTrainer,
    SyntheticProblem,
};
use fedcrypt_node::{LearnerEvent, LearnerStatus};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Central differences of the loss agree with the analytic gradient.
    #[test]
    fn gradient_matches_finite_differences(seed in any::<u64>(), dims in 1usize..6, samples in 1usize..12) {
        let p = SyntheticProblem::generate(seed, dims, samples, None);
        let theta: Vec<f64> = p.true_theta.iter().map(|t| t * 0.5 + 0.25).collect();
        let g = gradient(&theta, &p.data).unwrap();
        let h = 1e-5;
        for j in 0..dims {
            let mut up = theta.clone();
            let mut down = theta.clone();
            up[j] += h;
            down[j] -= h;
            let fd = (loss(&up, &p.data).unwrap() - loss(&down, &p.data).unwrap()) / (2.0 * h);
            let scale = g[j].abs().max(1e-3);
            prop_assert!((fd - g[j]).abs() / scale < 1e-6, "coord {}: fd {} vs {}", j, fd, g[j]);
        }
    }

    /// With equal partitions the mean of partition gradients is the pooled gradient.
    #[test]
    fn partition_gradients_average_to_pooled(seed in any::<u64>(), parts in 1usize..6) {
        let p = SyntheticProblem::generate(seed, 3, parts * 4, None);
        let theta = vec![0.1, -0.2, 0.3];
        let pooled = gradient(&theta, &p.data).unwrap();
        let per: Vec<Vec<f64>> = p.data.partition(parts).iter().map(|b| gradient(&theta, b).unwrap()).collect();
        let mean = local_aggregate(&per).unwrap();
        for (a, b) in mean.iter().zip(&pooled) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn two_domains_of_two_match_flat_four_party_federation() {
    let p = SyntheticProblem::generate(5, 3, 16, None);
    let parts = p.data.partition(4);
    let theta = vec![0.0; 3];
    let flat = local_aggregate(&parts.iter().map(|b| gradient(&theta, b).unwrap()).collect::<Vec<_>>()).unwrap();
    let mut d1 = LinearTrainer::new(theta.clone(), parts[..2].to_vec(), 0.1);
    let mut d2 = LinearTrainer::new(theta.clone(), parts[2..].to_vec(), 0.1);
    // the cross-domain divisor is the domain count: mean of two domain means
    let nested = local_aggregate(&[d1.gradient(), d2.gradient()]).unwrap();
    for (a, b) in nested.iter().zip(&flat) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(d1.local_learners(), 2);
}

#[test]
fn sample_weighting_matches_pooled_domain_gradient() {
    let p = SyntheticProblem::generate(6, 2, 10, None);
    let uneven = vec![
        Batch {
            features: p.data.features[..3].to_vec(),
            targets: p.data.targets[..3].to_vec(),
        },
        Batch {
            features: p.data.features[3..].to_vec(),
            targets: p.data.targets[3..].to_vec(),
        },
    ];
    let theta = vec![0.3, 0.3];
    let mut t = LinearTrainer::new(theta.clone(), uneven, 0.1).with_weighting(DomainWeighting::Samples);
    let pooled = gradient(&theta, &p.data).unwrap();
    for (a, b) in t.gradient().iter().zip(&pooled) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn federated_domains_train_like_centralized_descent() {
    let p = SyntheticProblem::generate(11, 3, 24, None);
    let parts = p.data.partition(4);
    let theta0 = vec![0.0; 3];
    let lr = 0.1;
    let rounds = 15;
    let sources: Vec<(String, Box<dyn GradientSource>)> = vec![
        (
            "dom-a".into(),
            Box::new(LinearTrainer::new(theta0.clone(), parts[..2].to_vec(), lr)),
        ),
        (
            "dom-b".into(),
            Box::new(LinearTrainer::new(theta0.clone(), parts[2..].to_vec(), lr)),
        ),
    ];
    let mut cl = Cluster::new(config(2, 3, Protocol::Ring, rounds), sources);
    cl.register_all();
    cl.drain();
    let reference = centralized_descent(&theta0, &p.data, lr, rounds as usize).unwrap();
    let last = reference.last().unwrap();
    for l in cl.learners.values() {
        assert_eq!(l.status(), LearnerStatus::Finished);
        for (a, b) in l.parameters().iter().zip(last) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
}

#[test]
fn learners_never_send_plaintext_gradients() {
    let sentinel = vec![1234.5678, -8765.4321, 4242.4242];
    let sources: Vec<(String, Box<dyn GradientSource>)> = ["a", "b", "c"]
        .iter()
        .map(|n| {
            (
                n.to_string(),
                Box::new(fedcrypt_node::model::FixedGradient::new(sentinel.clone())) as Box<dyn GradientSource>,
            )
        })
        .collect();
    let mut cl = Cluster::new(config(3, 3, Protocol::Broadcast, 1), sources);
    cl.register_all();
    cl.drain();
    let patterns: Vec<Vec<u8>> = sentinel.iter().map(|v| v.to_be_bytes().to_vec()).collect();
    for (from, _, frame) in &cl.log {
        if from.is_none() {
            continue;
        }
        let bytes = frame.encode();
        for p in &patterns {
            assert!(!bytes.windows(8).any(|w| w == p.as_slice()));
        }
    }
    assert_eq!(cl.results_for("a").len(), 1);
}

#[test]
fn rounds_buffer_messages_that_arrive_early() {
    let sources: Vec<(String, Box<dyn GradientSource>)> = ["a", "b", "c", "d"]
        .iter()
        .map(|n| {
            (
                n.to_string(),
                Box::new(fedcrypt_node::model::FixedGradient::new(vec![1.0, 2.0])) as Box<dyn GradientSource>,
            )
        })
        .collect();
    let mut cl = Cluster::new(config(4, 2, Protocol::AllReduce, 5), sources);
    cl.register_all();
    cl.drain();
    for name in ["a", "b", "c", "d"] {
        assert_eq!(cl.results_for(name), vec![vec![1.0, 2.0]; 5]);
    }
    let starts = cl
        .learner_events
        .iter()
        .filter(|(_, e)| matches!(e, LearnerEvent::RoundStarted { .. }))
        .count();
    assert_eq!(starts, 20);
}

#[test]
fn config_file_round_trip() {
    let text = "\
# domain gateway
name = hospital-a
endpoint = 10.0.0.4:7101
job_id = trial-7
token = 0101010101010101010101010101010101010101010101010101010101010101
role = local_aggregator
domain_learners = 4
location = eu-west
";
    let cfg: LearnerConfig = text.parse().unwrap();
    assert_eq!(cfg.name, "hospital-a");
    assert_eq!(cfg.role, Role::LocalAggregator);
    assert_eq!(cfg.domain_learners, 4);
    assert_eq!(cfg.location.as_deref(), Some("eu-west"));
    assert_eq!(cfg.job_id, fedcrypt_core::wire::JobId::from_label("trial-7"));
    let again: LearnerConfig = cfg.to_text().parse().unwrap();
    assert_eq!(again.job_id, cfg.job_id);
    assert_eq!(again.token.to_hex(), cfg.token.to_hex());
    assert_eq!(again.domain_learners, 4);
    let _ = job_id();
}

#[test]
fn config_errors() {
    let base = "name = a\nendpoint = e\njob_id = j\ntoken = ".to_string() + &"00".repeat(32) + "\n";
    assert!(base.parse::<LearnerConfig>().is_ok());
    assert!(matches!(
        (base.clone() + "colour = red\n").parse::<LearnerConfig>(),
        Err(ConfigError::UnknownKey { line: 5, .. })
    ));
    assert!(matches!(
        (base.clone() + "name = b\n").parse::<LearnerConfig>(),
        Err(ConfigError::Duplicate { .. })
    ));
    assert!(matches!(
        (base.clone() + "garbage\n").parse::<LearnerConfig>(),
        Err(ConfigError::Syntax { line: 5 })
    ));
    assert!(matches!(
        (base.clone() + "domain_learners = 2\n").parse::<LearnerConfig>(),
        Err(ConfigError::Invalid { .. })
    ));
    assert!(matches!(
        (base.clone() + "role = local_aggregator\ndomain_learners = 0\n").parse::<LearnerConfig>(),
        Err(ConfigError::Invalid { .. })
    ));
    assert!(matches!(
        "name = a\n".parse::<LearnerConfig>(),
        Err(ConfigError::Missing(_))
    ));
    assert!(matches!(
        "name = a\nendpoint = e\njob_id = j\ntoken = abc\n".parse::<LearnerConfig>(),
        Err(ConfigError::Invalid { key: "token", .. })
    ));
}
