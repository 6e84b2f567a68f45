use adavip::policy::PolicyParams;
use adavip::scene_world::{World, WorldConfig};
use adavip::vocab::Vocab;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn world() -> World {
    World::new(Vocab::default(), WorldConfig::default()).unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[test]
fn grad_log_prob_matches_finite_differences() {
    let world = world();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst = 0.0f64;
    for draw in 0..100 {
        let record = world.generate_record(rng.random()).unwrap();
        let params = PolicyParams::random(world.vocab().clone(), world.d_img(), 0.1, draw).unwrap();
        let (q, x, y) = (&record.query, &record.features_w, &record.y_w);
        let grad = params.grad_log_prob(q, x, y).unwrap();
        let active: Vec<usize> = (0..params.dim()).filter(|&c| (0..params.vocab_size()).any(|r| grad.get(r, c) != 0.0)).collect();
        for _ in 0..20 {
            let row = rng.random_range(0..params.vocab_size());
            let col = active[rng.random_range(0..active.len())];
            let h = 1e-5;
            let mut plus = params.clone();
            *plus.weights_mut().get_mut(row, col) += h;
            let mut minus = params.clone();
            *minus.weights_mut().get_mut(row, col) -= h;
            let fd = (plus.log_prob(q, x, y).unwrap().total - minus.log_prob(q, x, y).unwrap().total) / (2.0 * h);
            worst = worst.max(rel_err(grad.get(row, col), fd));
        }
    }
    assert!(worst < 1e-5, "worst relative error {worst:e}");
}

#[test]
fn golden_log_prob() {
    // Independently recomputed at 40 digits from the saved weights.
    let world = world();
    let params = PolicyParams::random(world.vocab().clone(), world.d_img(), 0.1, 42).unwrap();
    let record = world.generate_record(3).unwrap();
    let lp = params.log_prob(&record.query, &record.features_w, &record.y_w).unwrap().total;
    assert!((lp - -42.830875575956137).abs() < 1e-10, "{lp}");
}

#[test]
fn log_prob_ignores_unused_world_config() {
    let a = world();
    // Same vocabulary and grid; only the scene-sampling ranges differ.
    let b = World::new(Vocab::default(), WorldConfig { min_objects: 2, max_objects: 4, num_categories: 20, ..WorldConfig::default() }).unwrap();
    let record = a.generate_record(11).unwrap();
    let params = PolicyParams::random(a.vocab().clone(), a.d_img(), 0.1, 5).unwrap();
    let rebuilt = b.render_full(record.scene()).features();
    assert_eq!(rebuilt, record.features_w);
    let lp_a = params.log_prob(&record.query, &record.features_w, &record.y_w).unwrap();
    let lp_b = params.log_prob(&record.query, &rebuilt, &record.y_w).unwrap();
    assert_eq!(lp_a, lp_b);
}
