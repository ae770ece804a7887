use lfp_core::checkpoint;
use lfp_core::data;
use lfp_core::gradbase::{LossKind, SgdOptimizer};
use lfp_core::lfp::{LfpConfig, LfpOptimizer};
use lfp_core::network::{ActivationKind, Network};
use lfp_core::rewards::RewardKind;
use lfp_core::train::{self, EpochOptions, Trainer};

fn lfp_trainer(net: &Network) -> Trainer {
    Trainer::Lfp {
        opt: LfpOptimizer::new(
            net,
            LfpConfig {
                lr: 1.0,
                momentum: 0.95,
                ..LfpConfig::default()
            },
        )
        .unwrap(),
        reward: RewardKind::SoftmaxCe,
    }
}

fn fit(net: &mut Network, trainer: &mut Trainer, seed: u64) -> f64 {
    let (tr, te) = data::make_blobs(1100, seed).unwrap().split(100.0 / 1100.0, seed).unwrap();
    for e in 0..10 {
        let opts = EpochOptions {
            batch_size: 128,
            noise_std: 0.0,
            seed: e,
        };
        train::train_epoch(net, trainer, &tr, &opts).unwrap();
    }
    train::evaluate(net, &te).unwrap().accuracy
}

#[test]
fn lfp_and_gradient_both_learn_blobs() {
    let mut net = Network::mlp(2, &[32, 16], 2, ActivationKind::Relu, 1).unwrap();
    let mut t = lfp_trainer(&net);
    assert!(fit(&mut net, &mut t, 1) > 0.9);

    let mut net = Network::mlp(2, &[32, 16], 2, ActivationKind::Relu, 1).unwrap();
    let mut t = Trainer::Grad {
        opt: SgdOptimizer::new(&net, 0.1, 0.9).unwrap(),
        loss: LossKind::SoftmaxCe,
        surrogate: None,
    };
    assert!(fit(&mut net, &mut t, 1) > 0.9);
}

#[test]
fn training_is_deterministic_and_survives_a_checkpoint() {
    let mut a = Network::mlp(2, &[16], 2, ActivationKind::Relu, 7).unwrap();
    let mut b = a.clone();
    let (mut ta, mut tb) = (lfp_trainer(&a), lfp_trainer(&b));
    fit(&mut a, &mut ta, 3);
    fit(&mut b, &mut tb, 3);
    assert_eq!(a, b);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.toml");
    checkpoint::save(&a, &path, Some(7)).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back.network, a);
}
