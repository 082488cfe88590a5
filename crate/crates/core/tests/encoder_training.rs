use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use snapseg::encoder::{train, EncoderModel, Example, HeadMode, TrainConfig};

/// `n` points uniform in the unit cube at `offset`.
fn cube<R: Rng>(rng: &mut R, n: usize, offset: f64) -> Array2<f64> {
    Array2::from_shape_fn((n, 3), |_| offset + rng.random::<f64>())
}

#[test]
fn separable_toy_pairs_are_learned() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let offsets = [0.0, 10.0];
    let mut data = Vec::new();
    for i in 0..200 {
        let same = i % 2 == 0;
        let first = rng.random_range(0..2);
        let second = if same { first } else { 1 - first };
        data.push(Example::Pair {
            a: cube(&mut rng, 16, offsets[first]),
            b: cube(&mut rng, 16, offsets[second]),
            label: same as usize,
        });
    }
    let mut model = EncoderModel::new(&[3, 16, 16], HeadMode::Pair, 2, 1).unwrap();
    let cfg = TrainConfig {
        lr: 0.01,
        epochs: 50,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let trace = train(&mut model, &data, &cfg).unwrap();
    let best = trace.iter().map(|s| s.accuracy).fold(0.0, f64::max);
    eprintln!("final {:?}", trace.last().unwrap());
    assert!(best > 0.95, "best pair accuracy {best}");
    for (i, s) in trace.iter().enumerate() {
        assert_eq!(s.epoch, i);
    }
}

#[test]
fn separate_workers_reproduce_their_own_runs() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let data: Vec<Example> = (0..40)
        .map(|i| Example::Single {
            x: cube(&mut rng, 8, (i % 3) as f64),
            label: i % 3,
        })
        .collect();
    for workers in [1, 3] {
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            workers,
            ..TrainConfig::default()
        };
        let mut a = EncoderModel::new(&[3, 8, 8], HeadMode::Single, 3, 2).unwrap();
        let mut b = a.clone();
        let ta = train(&mut a, &data, &cfg).unwrap();
        let tb = train(&mut b, &data, &cfg).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(ta, tb);
    }
}
