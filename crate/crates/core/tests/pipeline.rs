//! Slow training-behavior checks that go beyond the per-module unit tests.

use pfd_core::net::{ConvNet, TrainConfig};
use pfd_core::synth;

#[test]
fn victim_overfits_a_tiny_subset() {
    // capability smoke: 100 samples, 30 epochs, train accuracy >= 0.99
    let ds = synth::make_dataset(100, 4242);
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut net = ConvNet::new(1, 28, 28, 10, 7).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.02,
        epochs: 30,
        batch_size: 16,
        momentum: 0.9,
        seed: 3,
    };
    let stats = net.train(&ds, &idx, &cfg).unwrap();
    let final_acc = stats.last().unwrap().accuracy;
    assert!(
        final_acc >= 0.99,
        "overfit accuracy {final_acc} below 0.99 after 30 epochs"
    );
    // loss is non-increasing in the large: final well below the start
    assert!(stats.last().unwrap().mean_loss < 0.1 * stats[0].mean_loss);
}
