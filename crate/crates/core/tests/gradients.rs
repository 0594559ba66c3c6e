//! Central finite differences against the analytic gradients, on a small
//! network where every coordinate can be checked quickly. The differencing
//! side only ever calls the forward-only loss functions, so the two routes
//! stay independent.

use promptforge_core::policy::{
    teacher_loss, teacher_loss_and_grad, value_regression_loss, value_regression_loss_and_grad,
    AdapterTarget, Grads, PolicyConfig, PolicyParameters, RewritePair,
};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-5;

fn small_config() -> PolicyConfig {
    PolicyConfig {
        vocab_size: 9,
        max_seq: 16,
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        d_ff: 16,
        adapter_rank: 8,
        ..Default::default()
    }
}

fn teacher_batch() -> Vec<RewritePair> {
    vec![
        RewritePair::new(vec![5, 6, 7], vec![5, 8, 7]),
        RewritePair::new(vec![8, 6], vec![8, 5, 5]),
        RewritePair::new(vec![7], vec![6]),
    ]
}

fn value_batch() -> Vec<(Vec<u32>, Vec<f64>)> {
    vec![
        (vec![0, 5, 6, 1, 7], vec![0.3, -0.2, 0.8, 0.1, -0.5]),
        (vec![0, 8, 1], vec![1.2, -0.7, 0.4]),
    ]
}

fn combined_loss(params: &PolicyParameters) -> f64 {
    teacher_loss(params, &teacher_batch()).unwrap()
        + value_regression_loss(params, &value_batch()).unwrap()
}

fn combined_grads(params: &PolicyParameters) -> Grads {
    let (_, mut g) = teacher_loss_and_grad(params, &teacher_batch()).unwrap();
    let (_, gv) = value_regression_loss_and_grad(params, &value_batch()).unwrap();
    g.add(&gv);
    g
}

/// Checks sampled coordinates of every trainable tensor, requiring at least
/// `min_coords` checks overall. Returns how many were checked.
fn check_against_differences(params: &mut PolicyParameters, min_coords: usize) -> usize {
    let grads = combined_grads(params);
    let names: Vec<String> = params.trainable_names();
    let mut rng = StdRng::seed_from_u64(99);

    let mut coords: Vec<(String, usize)> = Vec::new();
    for name in &names {
        let len = params.tensor(name).unwrap().len();
        // every coordinate of small tensors, a sample of larger ones
        if len <= 24 {
            coords.extend((0..len).map(|i| (name.clone(), i)));
        } else {
            for _ in 0..24 {
                coords.push((name.clone(), rng.random_range(0..len)));
            }
        }
    }
    while coords.len() < min_coords {
        let name = &names[rng.random_range(0..names.len())];
        let len = params.tensor(name).unwrap().len();
        coords.push((name.clone(), rng.random_range(0..len)));
    }

    for (name, idx) in &coords {
        let analytic = grads.by_name(params, name).expect("trainable tensor has a gradient")
            .data[*idx];

        let original = params.tensor(name).unwrap().data[*idx];
        params.tensor_mut(name).unwrap().data[*idx] = original + H;
        let up = combined_loss(params);
        params.tensor_mut(name).unwrap().data[*idx] = original - H;
        let down = combined_loss(params);
        params.tensor_mut(name).unwrap().data[*idx] = original;
        let numeric = (up - down) / (2.0 * H);

        // The denominator is floored at the resolution of central
        // differencing itself: roundoff on (up - down) is about
        // eps * |loss| / h ~ 1e-10, so magnitudes below 1e-4 cannot be
        // certified to 1e-5 relative and are held to 1e-9 absolute instead.
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4);
        assert!(
            rel < REL_TOL,
            "{name}[{idx}]: relative error {rel:.3e}, analytic {analytic}, numeric {numeric}"
        );
    }
    coords.len()
}

#[test]
fn full_parameter_gradients_match_finite_differences() {
    let mut params = PolicyParameters::init(&small_config(), &mut StdRng::seed_from_u64(42)).unwrap();
    let checked = check_against_differences(&mut params, 200);
    assert!(checked >= 200, "only {checked} coordinates checked");
}

#[test]
fn adapter_and_value_head_gradients_match_finite_differences() {
    let mut params = PolicyParameters::init(&small_config(), &mut StdRng::seed_from_u64(42)).unwrap();
    params
        .attach_adapters(8, &[AdapterTarget::Q, AdapterTarget::V], &mut StdRng::seed_from_u64(7))
        .unwrap();

    // the b factors start at zero, which would zero out every a-factor
    // gradient; move them off zero so all coordinates carry signal
    let mut rng = StdRng::seed_from_u64(17);
    for name in params.tensor_names() {
        if name.ends_with("lora_b") || name.starts_with("value.") {
            for v in &mut params.tensor_mut(&name).unwrap().data {
                *v = rng.random_range(-0.05..0.05);
            }
        }
    }

    let trainable = params.trainable_names();
    assert!(trainable.iter().all(|n| n.contains("lora") || n.starts_with("value.")));

    let checked = check_against_differences(&mut params, 200);
    assert!(checked >= 200, "only {checked} coordinates checked");
}

#[test]
fn gradients_are_exactly_zero_at_zero_weight_even_with_adapters() {
    let mut params = PolicyParameters::init(&small_config(), &mut StdRng::seed_from_u64(3)).unwrap();
    params
        .attach_adapters(4, &[AdapterTarget::Q, AdapterTarget::V], &mut StdRng::seed_from_u64(5))
        .unwrap();
    let mut pair = RewritePair::new(vec![5, 6], vec![7]);
    pair.weight = 0.0;
    let (_, grads) = teacher_loss_and_grad(&params, &[pair]).unwrap();
    for name in params.trainable_names() {
        let g = grads.by_name(&params, &name).unwrap();
        assert!(g.data.iter().all(|&v| v == 0.0), "{name} moved");
    }
}
