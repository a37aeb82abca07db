use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use snnq::neuron::{self, InferState, LifParams, Matrix, StateHook, TrainState};

fn random_case(rng: &mut ChaCha8Rng) -> (LifParams, Matrix, Vec<Vec<f64>>) {
    let n_in = rng.random_range(1..12);
    let n_out = rng.random_range(1..8);
    let alpha = rng.random_range(0.01..0.99);
    let params = LifParams::new(alpha, rng.random_range(0.2..2.0), 10.0).unwrap();
    let scale = rng.random_range(0.1..1.5);
    let w = Matrix::from_vec(
        n_out,
        n_in,
        (0..n_in * n_out).map(|_| rng.random_range(-scale..scale)).collect(),
    )
    .unwrap();
    let rate = rng.random_range(0.05..0.6);
    let inputs = (0..200)
        .map(|_| (0..n_in).map(|_| f64::from(u8::from(rng.random_bool(rate)))).collect())
        .collect();
    (params, w, inputs)
}

/// Textbook reset-to-zero LIF with explicit spike memory.
fn reference_lif(params: &LifParams, w: &Matrix, inputs: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut u = vec![0.0; w.rows];
    let mut s = vec![0.0; w.rows];
    let (mut us, mut ss) = (Vec::new(), Vec::new());
    for x in inputs {
        for i in 0..w.rows {
            let drive: f64 = (0..w.cols).map(|j| w.get(i, j) * x[j]).sum();
            u[i] = params.alpha * u[i] * (1.0 - s[i]) + drive;
            s[i] = if u[i] >= params.u_thres { 1.0 } else { 0.0 };
        }
        us.push(u.clone());
        ss.push(s.clone());
    }
    (us, ss)
}

#[test]
fn inference_and_training_forms_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    let mut fired = 0usize;
    for _ in 0..1000 {
        let (params, w, inputs) = random_case(&mut rng);
        let (ref_u, ref_s) = reference_lif(&params, &w, &inputs);
        let mut inf = InferState::zeros(w.rows);
        let mut tr = TrainState::zeros(w.cols, w.rows);
        let mut drive = vec![0.0; w.rows];
        for (t, x) in inputs.iter().enumerate() {
            w.matvec_into(x, &mut drive);
            let s_inf = neuron::step_inference(&mut inf, &params, &drive).unwrap();
            neuron::step_training(&mut tr, &params, &w, x).unwrap();
            assert_eq!(s_inf, tr.s, "spike trains differ at step {t}");
            assert_eq!(s_inf, ref_s[t]);
            for i in 0..w.rows {
                worst = worst.max((inf.u[i] - tr.u[i]).abs());
                worst = worst.max((inf.u[i] - ref_u[t][i]).abs());
            }
            fired += s_inf.iter().filter(|&&s| s > 0.0).count();
        }
    }
    assert!(worst <= 1e-6, "max |U_inf - U_train| = {worst:e}");
    assert!(fired > 10_000, "trials barely spiked ({fired} spikes)");
}

/// Replaces the reset trace with values recorded from a base run.
struct FrozenReset<'a> {
    recorded: &'a [Vec<f64>],
    step: usize,
}

impl StateHook for FrozenReset<'_> {
    fn after_r(&mut self, r: &mut [f64]) {
        r.copy_from_slice(&self.recorded[self.step]);
        self.step += 1;
    }
}

#[test]
fn potential_gradient_is_presynaptic_trace() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..100 {
        let (params, w, inputs) = random_case(&mut rng);
        let steps = rng.random_range(1..inputs.len());
        let inputs = &inputs[..steps];

        let mut base = TrainState::zeros(w.cols, w.rows);
        let mut resets = Vec::new();
        for x in inputs {
            neuron::step_training(&mut base, &params, &w, x).unwrap();
            resets.push(base.r.clone());
        }

        let i = rng.random_range(0..w.rows);
        let j = rng.random_range(0..w.cols);
        let h = 1e-6;
        let run = |delta: f64| {
            let mut wp = w.clone();
            wp.data[i * w.cols + j] += delta;
            let mut st = TrainState::zeros(w.cols, w.rows);
            let mut hook = FrozenReset {
                recorded: &resets,
                step: 0,
            };
            for x in inputs {
                neuron::step_training_with(&mut st, &params, x, |p, u| wp.matvec_into(p, u), &mut hook).unwrap();
            }
            st.u[i]
        };
        let fd = (run(h) - run(-h)) / (2.0 * h);
        let p = base.p[j];
        let err = (fd - p).abs() / p.abs().max(1e-3);
        assert!(err <= 1e-4, "case {case}: fd {fd} vs trace {p}");
    }
}
