use grumt::gradcheck::{self, Instance, DEFAULT_THRESHOLD};
use grumt::gru::{
    backward_sequence, forward_batch, forward_sequence, Ablation, HiddenState, ModelParameters,
    ModelShape,
};
use grumt::numerics::{
    cross_entropy, finite_difference_check, seeded_rng, softmax, Matrix, Vector, FD_EPSILON,
};
use rand::Rng;

fn inputs(n: usize, dim: usize, seed: u64) -> Vec<Vector<f64>> {
    let mut rng = seeded_rng(seed);
    (0..n)
        .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>().into())
        .collect()
}

#[test]
fn hundred_random_instances_pass() {
    let report = gradcheck::run(2024, 150, DEFAULT_THRESHOLD).unwrap();
    assert!(report.passed(), "{report}");
}

#[test]
fn reset_path_mutation_is_caught() {
    let report = gradcheck::run_with(2024, 100, DEFAULT_THRESHOLD, Ablation::ResetPath).unwrap();
    assert!(report.max_error > 1e-3, "{report}");
}

#[test]
fn central_differences_on_a_fixed_instance() {
    // T=3, two layers, hidden 4, vocab 7, loss on the final logits
    let shape = ModelShape {
        layers: 2,
        hidden_size: 4,
        input_size: 3,
        vocab_size: 7,
    };
    let params = ModelParameters::<f64>::glorot(shape, 11);
    let xs = inputs(3, 3, 5);
    let h0 = HiddenState::zeros(shape, 1);
    let target = 4;
    let (_, logits, tape) = forward_sequence(&xs, &params, &h0).unwrap();
    let (_, dlogits) = cross_entropy(&softmax(&logits), target).unwrap();
    let grads = backward_sequence(&tape, &dlogits, &params).unwrap();
    let mut probe = params.clone();
    let err = finite_difference_check(
        |flat| {
            probe.assign_flat(flat).unwrap();
            let (_, l, _) = forward_sequence(&xs, &probe, &h0).unwrap();
            cross_entropy(&softmax(&l), target).unwrap().0
        },
        &params.flatten(),
        &grads.flatten(),
        FD_EPSILON,
    )
    .unwrap();
    assert!(err < 1e-5, "relative error {err}");
}

#[test]
fn complex_step_agrees_with_central_differences_where_both_are_sharp() {
    for seed in 0..10 {
        let inst = Instance::random(seed);
        assert!(inst.check(Ablation::None).unwrap() < 1e-8);
        assert!(inst.check_central(Ablation::None).unwrap() < 1e-2);
    }
}

#[test]
fn streaming_equals_one_pass() {
    let shape = ModelShape {
        layers: 3,
        hidden_size: 5,
        input_size: 4,
        vocab_size: 6,
    };
    let params = ModelParameters::<f64>::glorot(shape, 3);
    let xs = inputs(9, 4, 8);
    let h0 = HiddenState::zeros(shape, 1);
    let (whole, logits, _) = forward_sequence(&xs, &params, &h0).unwrap();

    let mut state = h0;
    let mut last = None;
    for chunk in xs.chunks(2) {
        let (s, l, _) = forward_sequence(chunk, &params, &state).unwrap();
        state = s;
        last = Some(l);
    }
    for (a, b) in whole.layers.iter().zip(&state.layers) {
        for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() < 1e-6);
        }
    }
    for (x, y) in logits.iter().zip(last.unwrap().iter()) {
        assert!((x - y).abs() < 1e-6);
    }
}

#[test]
fn batched_rows_match_single_sequences() {
    let shape = ModelShape {
        layers: 2,
        hidden_size: 8,
        input_size: 4,
        vocab_size: 5,
    };
    let params = ModelParameters::<f32>::glorot(shape, 9);
    let batch = 6;
    let steps = 5;
    let seqs: Vec<Vec<Vector<f32>>> = (0..batch)
        .map(|b| inputs(steps, 4, 100 + b as u64).iter().map(|v| v.cast()).collect())
        .collect();
    let stacked: Vec<Matrix<f32>> = (0..steps)
        .map(|t| Matrix::from_rows(&seqs.iter().map(|s| s[t].to_vec()).collect::<Vec<_>>()).unwrap())
        .collect();
    let (state, _) = forward_batch(&stacked, &params, &HiddenState::zeros(shape, batch)).unwrap();
    let batched = grumt::gru::output_logits(&params, state.top()).unwrap();
    for (b, seq) in seqs.iter().enumerate() {
        let (_, logits, _) = forward_sequence(seq, &params, &HiddenState::zeros(shape, 1)).unwrap();
        for (x, y) in batched.row(b).iter().zip(logits.iter()) {
            assert!((x - y).abs() < 1e-5, "row {b}: {x} vs {y}");
        }
    }
}
