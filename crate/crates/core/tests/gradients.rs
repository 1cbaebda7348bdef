//! Analytic gradients of the toy model against central finite differences.

use fusemerge::train::{DialogueSample, ToyLm, EMBED, OUT};
use fusemerge::DistMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-6;

struct Case {
    model: ToyLm<f64>,
    sample: DialogueSample,
    teacher: Option<DistMatrix<f64>>,
    lambda: f64,
}

fn random_case(seed: u64, v: usize, d: usize, n: usize) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = ToyLm::random(v, d, 1.0, rng.gen());
    let ids: Vec<usize> = (0..n).map(|_| rng.gen_range(0..v)).collect();
    let mut mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
    mask[n - 1] = true;
    let logits: Vec<f64> = (0..n * v).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let teacher = rng.gen_bool(0.8).then(|| DistMatrix::softmax(n, v, &logits));
    Case {
        model,
        sample: DialogueSample::new(ids, mask).unwrap(),
        teacher,
        lambda: rng.gen_range(0.0..=1.0),
    }
}

fn loss_at(case: &Case, embed: &[f64], out: &[f64]) -> f64 {
    let m = ToyLm::from_parts(case.model.vocab_size(), case.model.dim(), embed.to_vec(), out.to_vec()).unwrap();
    m.loss_and_grads(&case.sample, case.teacher.as_ref(), case.lambda).unwrap().loss
}

/// Central differences over every parameter, independent of the backward pass.
fn numeric_grads(case: &Case) -> (Vec<f64>, Vec<f64>) {
    let embed = case.model.embed().to_vec();
    let out = case.model.out().to_vec();
    let mut ge = vec![0.0; embed.len()];
    for (k, g) in ge.iter_mut().enumerate() {
        let (mut hi, mut lo) = (embed.clone(), embed.clone());
        hi[k] += EPS;
        lo[k] -= EPS;
        *g = (loss_at(case, &hi, &out) - loss_at(case, &lo, &out)) / (2.0 * EPS);
    }
    let mut go = vec![0.0; out.len()];
    for (k, g) in go.iter_mut().enumerate() {
        let (mut hi, mut lo) = (out.clone(), out.clone());
        hi[k] += EPS;
        lo[k] -= EPS;
        *g = (loss_at(case, &embed, &hi) - loss_at(case, &embed, &lo)) / (2.0 * EPS);
    }
    (ge, go)
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let mut worst = 0.0f64;
    for seed in 0..25u64 {
        let (v, d, n) = (5, 3, 4);
        let case = random_case(seed, v, d, n);
        let eval = case.model.loss_and_grads(&case.sample, case.teacher.as_ref(), case.lambda).unwrap();
        let (ne, no) = numeric_grads(&case);
        let ae = eval.grads.get(EMBED).unwrap().to_f64_vec();
        let ao = eval.grads.get(OUT).unwrap().to_f64_vec();
        for (a, n) in ae.iter().zip(&ne).chain(ao.iter().zip(&no)) {
            worst = worst.max(rel_error(*a, *n));
        }
    }
    println!("worst relative error {worst:e}");
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}
