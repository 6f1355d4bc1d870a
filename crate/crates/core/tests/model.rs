use rand::Rng;
use rfprint::hwmodel::total_macs;
use rfprint::model::ops::{prnn_step, PrnnCell};
use rfprint::model::{LayerSpec, Mode, Model, ModelSpec, NrlConfig, PrnnCnnConfig};
use rfprint::seed;
use rfprint::train::{backward, gradient_check, init_model, Example};

const H: f64 = 1e-4;
const TOL: f64 = 1e-4;

/// Initialised model with every bias and alpha moved off its default so no
/// parameter sits at a special value.
fn randomised(spec: ModelSpec, s: u64) -> Model {
    let mut m = init_model(spec, s).unwrap();
    let mut rng = seed::rng(s, &[99]);
    for i in 0..m.spec.layers.len() {
        let range = m.layer_range(i);
        match m.spec.layers[i] {
            LayerSpec::Prnn { inputs, neurons, .. } => {
                let start = range.start + neurons * inputs + neurons * neurons;
                for k in 0..neurons {
                    m.params[start + k] = rng.random_range(-0.3..0.3);
                    m.params[start + neurons + k] = rng.random_range(0.3..0.9);
                }
            }
            LayerSpec::Conv1d { out_ch: n, .. } | LayerSpec::Dense { outputs: n, .. } => {
                for p in &mut m.params[range.end - n..range.end] {
                    *p = rng.random_range(-0.2..0.2);
                }
            }
            _ => {}
        }
    }
    m
}

fn batch(m: &Model, n: usize, s: u64) -> Vec<Example> {
    let mut rng = seed::rng(s, &[7]);
    let len = m.spec.input_channels * m.spec.input_len;
    let classes = m.spec.num_classes();
    (0..n)
        .map(|k| Example {
            x: (0..len).map(|_| rng.random_range(-1.5..1.5)).collect(),
            label: k % classes,
            dropout_seed: 1000 + k as u64,
        })
        .collect()
}

#[test]
fn tiny_prnn_cnn_gradients_match_finite_differences() {
    let m = randomised(ModelSpec::prnn_cnn(&PrnnCnnConfig::tiny()).unwrap(), 11);
    let b = batch(&m, 3, 11);
    let all: Vec<usize> = (0..m.params.len()).collect();
    let err = gradient_check(&m, &b, &all, H, 1e-7).unwrap();
    assert!(err <= TOL, "max relative error {err:e}");
}

#[test]
fn tiny_nrl_gradients_match_with_dropout() {
    let m = randomised(ModelSpec::nrl(&NrlConfig::tiny()).unwrap(), 12);
    assert!(m.spec.layers.iter().any(|l| matches!(l, LayerSpec::Dropout { .. })));
    let b = batch(&m, 3, 12);
    let all: Vec<usize> = (0..m.params.len()).collect();
    let err = gradient_check(&m, &b, &all, H, 1e-7).unwrap();
    assert!(err <= TOL, "max relative error {err:e}");
}

#[test]
fn tiny_models_cover_two_hundred_parameters() {
    let a = ModelSpec::prnn_cnn(&PrnnCnnConfig::tiny()).unwrap().stored_len();
    let b = ModelSpec::nrl(&NrlConfig::tiny()).unwrap().stored_len();
    assert!(a + b >= 200, "{a} + {b}");
}

#[test]
fn frozen_alpha_gets_no_gradient() {
    let cfg = PrnnCnnConfig {
        alpha_trainable: false,
        ..PrnnCnnConfig::tiny()
    };
    let m = randomised(ModelSpec::prnn_cnn(&cfg).unwrap(), 13);
    let (_, g) = backward(&m, &batch(&m, 2, 13)).unwrap();
    let mask = m.trainable_mask();
    assert_eq!(mask.iter().filter(|t| !**t).count(), 2);
    for (gi, t) in g.iter().zip(&mask) {
        if !t {
            assert_eq!(*gi, 0.0);
        }
    }
}

#[test]
fn zeroed_fc_cuts_upstream_gradients() {
    let mut m = randomised(ModelSpec::prnn_cnn(&PrnnCnnConfig::tiny()).unwrap(), 14);
    let fc = m.spec.layers.len() - 2;
    let range = m.layer_range(fc);
    let outputs = m.spec.num_classes();
    m.params[range.start..range.end - outputs].fill(0.0);
    let (_, g) = backward(&m, &batch(&m, 2, 14)).unwrap();
    assert!(g[..range.start].iter().all(|&v| v == 0.0));
    assert!(g[range.end - outputs..range.end].iter().any(|&v| v != 0.0));
}

#[test]
fn doubling_the_loss_doubles_every_gradient() {
    let m = randomised(ModelSpec::prnn_cnn(&PrnnCnnConfig::tiny()).unwrap(), 15);
    let ex = &batch(&m, 1, 15)[0];
    let trace = m.trace(&ex.x, &mut Mode::<rand_chacha::ChaCha8Rng>::Inference, &mut ()).unwrap();
    let mut dout = vec![0.0; m.spec.num_classes()];
    dout[ex.label] = -1.0;
    let mut g1 = vec![0.0; m.params.len()];
    m.backward(&trace, &dout, &mut g1);
    dout[ex.label] = -2.0;
    let mut g2 = vec![0.0; m.params.len()];
    m.backward(&trace, &dout, &mut g2);
    for (a, b) in g1.iter().zip(&g2) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn prnn_state_decays_without_input() {
    let (h, inputs) = (16, 64);
    let mut rng = seed::rng(16, &[]);
    for trial in 0..5 {
        // Frobenius norm 0.5 bounds the spectral radius by 0.5.
        let mut w_rec: Vec<f64> = (0..h * h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let fro = w_rec.iter().map(|v| v * v).sum::<f64>().sqrt();
        w_rec.iter_mut().for_each(|v| *v *= 0.5 / fro);
        let alpha = vec![0.2 + 0.2 * trial as f64; h];
        let cell = PrnnCell {
            inputs,
            neurons: h,
            w_in: &vec![0.3; h * inputs],
            w_rec: &w_rec,
            b: &vec![0.0; h],
            alpha: &alpha,
        };
        let x = vec![0.0; inputs];
        let mut s: Vec<f64> = (0..h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let start = norm(&s);
        for _ in 0..300 {
            s = prnn_step(&s, &x, &cell);
        }
        assert!(norm(&s) < 1e-3 * start, "trial {trial}: {} from {start}", norm(&s));
    }
}

#[test]
fn instrumented_forward_matches_mac_counter() {
    for spec in [
        ModelSpec::prnn_cnn(&PrnnCnnConfig::default()).unwrap(),
        ModelSpec::nrl(&NrlConfig::default()).unwrap(),
        ModelSpec::prnn_cnn(&PrnnCnnConfig::tiny()).unwrap(),
        ModelSpec::nrl(&NrlConfig::tiny()).unwrap(),
    ] {
        let m = init_model(spec, 3).unwrap();
        let x = vec![0.1; m.spec.input_channels * m.spec.input_len];
        let (_, macs) = m.forward_counted(&x).unwrap();
        assert_eq!(macs, total_macs(&m.spec).unwrap(), "{}", m.spec.arch);
    }
}

#[test]
fn default_mac_totals() {
    let p = total_macs(&ModelSpec::prnn_cnn(&PrnnCnnConfig::default()).unwrap()).unwrap();
    let n = total_macs(&ModelSpec::nrl(&NrlConfig::default()).unwrap()).unwrap();
    assert_eq!(p, 40_960 + 35_840 + 9_216 + 2_880);
    // conv: out_len * c_out * c_in * k; dense: in * out.
    let nrl = 1006 * 128 * 2 * 19 + 489 * 32 * 128 * 15 + 234 * 16 * 32 * 11 + 1872 * 128 + 128 * 64 + 64 * 30;
    assert_eq!(n, nrl);
}
