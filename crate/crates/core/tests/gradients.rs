use cast_core::backbone::{BlockConfig, FlowExample, Fusion, Model, ModelConfig, Prompt};
use cast_core::data::{tokenize, N_MELS};
use cast_core::gradcheck::check_gradients;
use cast_core::{Caption, FlowStep, Mat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-4;
const FLOOR: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn toy(fusion: Fusion) -> ModelConfig {
    ModelConfig {
        block: BlockConfig { n_layers: 2, n_heads: 2, d_model: 8, d_timbre: 4, fusion },
        n_conv: 1,
        n_mels: N_MELS,
        d_text: 4,
        chunk_size: 2,
    }
}

fn grid(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat<f64> {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// A model with every tensor randomized so no gate or head hides a path.
fn random_model(fusion: Fusion, seed: u64) -> Model<f64> {
    let mut model = Model::<f64>::new(toy(fusion), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        for v in model.params.get_mut(id) {
            *v = rng.gen_range(-0.6..0.6);
        }
    }
    model
}

fn audit(model: &Model<f64>, prompt: Prompt<'_, f64>, cfg_drop: bool, rng: &mut ChaCha8Rng) -> f64 {
    let x0 = grid(4, N_MELS, rng);
    let x1 = grid(4, N_MELS, rng);
    let chars = tokenize("ab c").unwrap();
    let ex = FlowExample { x0: &x0, x1: &x1, tau: FlowStep::new(0.37).unwrap(), chars: &chars, prompt, cfg_drop };
    let report = check_gradients(model, &ex, H, FLOOR).unwrap();
    let worst = report.worst().unwrap();
    eprintln!(
        "{:?} drop={cfg_drop}: {} scalars, worst {} rel {:.2e} abs {:.2e}",
        model.fusion(),
        report.n_checked,
        worst.name,
        worst.max_rel_err,
        worst.max_abs_err
    );
    report.max_rel_err()
}

#[test]
fn speech_prompt_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let prompt: Mat<f32> = grid(4, N_MELS, &mut rng).cast();
    for fusion in Fusion::ALL {
        let model = random_model(fusion, 7);
        let err = audit(&model, Prompt::Speech(&prompt), false, &mut rng);
        assert!(err < TOL, "{fusion}: {err:e}");
    }
}

#[test]
fn caption_and_dropped_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let caption: Caption = "gender=0,pitch=2,rate=1,expressiveness=0".parse().unwrap();
    for fusion in Fusion::ALL {
        let model = random_model(fusion, 8);
        let err = audit(&model, Prompt::Caption(&caption), false, &mut rng);
        assert!(err < TOL, "{fusion} caption: {err:e}");
        let err = audit(&model, Prompt::None, true, &mut rng);
        assert!(err < TOL, "{fusion} dropped: {err:e}");
    }
}
