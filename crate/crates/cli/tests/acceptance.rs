//! Release gates. One test per shipped guarantee, each ending in a single
//! `[PASS]` line (visible under `--nocapture`); a failed assertion is a
//! failed gate. The two gates that need the UCI HAR corpus print a loud
//! `[SKIP]` when it is not on disk, so a green run without the dataset is
//! explicit about what it did not check.
//!
//! Gates 1–6 are self-contained and fast. Gate 7 trains the desk-scale
//! configuration on the real dataset (minutes, not hours); gate 8 compares
//! architecture variants on a reduced budget and is soft by design — it
//! warns on small orderings and fails only on gross ones.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use resbidir::data::{
    self, fit_normalizer, slide_windows, toy_two_class, window_step, RawSeries,
};
use resbidir::layers::{
    batch_norm, bidir_layer_forward, lstm_cell_step, network_forward, BatchNormParams,
    BidirLayerParams, BnContext, DropoutPosition, LstmLayerParams, LstmState, Mode,
    NetworkArchitecture,
};
use resbidir::metrics::ConfusionMatrix;
use resbidir::tensor::BoundParams;
use resbidir::train::{
    classification_loss, clip_gradients, train, Model, TrainConfig, TrainError,
};
use resbidir::{grad_check, NodeId, ParamStore, Tape, Tensor, TensorError};
use resbidir_cli::commands::{cmd_ablation, cmd_train, load_dataset};
use resbidir_cli::config::{DatasetKind, ExperimentConfig};

// ---------------------------------------------------------------------------
// Shared helpers
// ---------------------------------------------------------------------------

const TOLERANCE: f64 = 1e-4;
const EPSILON: f64 = 1e-5;
const KINK_CLEARANCE: f64 = 1e-3;
const GRADIENT_FLOOR: f64 = 1e-7;
const SEEDS_REQUIRED: usize = 20;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], limit: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * limit)
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn one_hot_rows(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, classes]);
    for row in 0..n {
        let hot = rng.gen_range(0..classes);
        t.data_mut()[row * classes + hot] = 1.0;
    }
    t
}

fn layer_to_tensor(e: resbidir::layers::LayerError) -> TensorError {
    match e {
        resbidir::layers::LayerError::Tensor(t) => t,
        other => TensorError::Invalid {
            op: "layers",
            msg: other.to_string(),
        },
    }
}

fn loss_to_tensor(e: TrainError) -> TensorError {
    match e {
        TrainError::Tensor(t) => t,
        other => TensorError::Invalid {
            op: "classification_loss",
            msg: other.to_string(),
        },
    }
}

/// Analytic gradients from one backward pass, then central differences over
/// every parameter element. Returns the worst relative error.
fn max_gradient_error<F>(store: &mut ParamStore, build: F) -> f64
where
    F: Fn(&mut Tape, &BoundParams) -> Result<NodeId, TensorError>,
{
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let loss = build(&mut tape, &bound).expect("forward");
    tape.backward(loss).expect("backward");
    store.harvest(&tape, &bound).expect("harvest");
    drop(tape);
    let report = grad_check(store, EPSILON, |s| {
        let mut tape = Tape::new();
        let bound = s.bind(&mut tape);
        let loss = build(&mut tape, &bound)?;
        tape.value(loss).item()
    })
    .expect("finite differences");
    report.max_relative_error
}

/// Root of the repository, resolved from this crate's location.
fn repo_path(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("..")
        .join("..")
        .join(rel)
}

/// Locates the UCI HAR corpus: `$UCI_HAR_ROOT` first, then the conventional
/// in-repo location. `None` means the dataset-bound gates must skip.
fn uci_root() -> Option<PathBuf> {
    if let Ok(p) = std::env::var("UCI_HAR_ROOT") {
        let pb = PathBuf::from(p);
        if pb.is_dir() {
            return Some(pb);
        }
    }
    let local = repo_path("data/UCI HAR Dataset");
    if local.is_dir() {
        return Some(local);
    }
    None
}

fn skip_uci(gate: &str) {
    let msg = format!(
        "[SKIP] {gate}: UCI HAR dataset not found — set UCI_HAR_ROOT to the \
         dataset root or unpack it to data/UCI HAR Dataset/ (expects \
         <root>/{{train,test}}/Inertial Signals/*.txt plus y_*.txt). \
         This gate did NOT run."
    );
    println!("{msg}");
    eprintln!("{msg}");
}

/// The shipped desk-scale configuration, pointed at the resolved dataset
/// root and a scratch output directory.
fn desk_scale_config(root: &Path, out: &Path) -> ExperimentConfig {
    let text = std::fs::read_to_string(repo_path("configs/uci_2x2.conf"))
        .expect("configs/uci_2x2.conf is part of the repository");
    let mut cfg = ExperimentConfig::parse(&text).expect("shipped config parses");
    cfg.dataset_path = root.display().to_string();
    cfg.output_dir = out.display().to_string();
    cfg
}

// ---------------------------------------------------------------------------
// Gate 1: gradient correctness
// ---------------------------------------------------------------------------

/// End-to-end finite-difference check of the full network (1 block x 1
/// bidirectional layer, h=3, d=2, T=4, batch 2, dropout off, normalisation
/// in training mode): max relative error < 1e-4 at eps=1e-5, each check
/// under 10 seconds, over 20 accepted seeds. The same bound must hold for
/// every layer primitive in isolation.
#[test]
fn gate_1_gradient_correctness() {
    let arch = NetworkArchitecture {
        residual_blocks: 1,
        layers_per_block: 1,
        hidden_width: 3,
        input_channels: 2,
        num_classes: 2,
        window_length: 4,
        dropout_keep_prob: 1.0,
        dropout_position: DropoutPosition::OutputOnly,
        residual_skips: true,
        bidirectional: true,
        batch_norm: true,
        bn_beta_init: 0.0,
        bn_momentum: 0.99,
    };
    let (batch, t) = (2usize, arch.window_length);

    // --- full network, 20 seeds ---
    let mut accepted = 0usize;
    let mut candidate = 0u64;
    let mut worst_seen = 0.0f64;
    let mut slowest = 0.0f64;
    while accepted < SEEDS_REQUIRED {
        assert!(
            candidate < 200,
            "only {accepted} of {SEEDS_REQUIRED} seeds cleared the guards in 200 candidates"
        );
        let seed = candidate;
        candidate += 1;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = arch.init_params(&mut rng).unwrap();
        let x = random_tensor(&mut rng, &[batch, t, arch.input_channels], 1.0);
        let targets = one_hot_rows(&mut rng, batch, arch.num_classes);

        let arch_c = arch.clone();
        let build = move |tape: &mut Tape, bound: &BoundParams| -> Result<NodeId, TensorError> {
            let net = arch_c.bind_network(bound).map_err(layer_to_tensor)?;
            let mut buffers = arch_c.init_buffers();
            let x_id = tape.leaf(x.clone());
            let logits =
                network_forward(tape, &arch_c, &net, &mut buffers, x_id, Mode::Train, None)
                    .map_err(layer_to_tensor)?;
            classification_loss(tape, logits, &targets, &[], 0.0).map_err(loss_to_tensor)
        };

        // Accept only evaluation points where central differences can see
        // the truth: every ReLU input clear of its kink, every analytic
        // gradient above the finite-difference noise floor.
        let mut probe = Tape::new();
        let bound = store.bind(&mut probe);
        let loss = build(&mut probe, &bound).unwrap();
        let clearance = probe.relu_min_abs_input().unwrap_or(f64::INFINITY);
        if clearance < KINK_CLEARANCE {
            continue;
        }
        probe.backward(loss).unwrap();
        store.harvest(&probe, &bound).unwrap();
        drop(probe);
        let resolvable = store
            .iter()
            .all(|(_, p)| p.grad.data().iter().all(|g| g.abs() >= GRADIENT_FLOOR));
        if !resolvable {
            continue;
        }

        let begun = Instant::now();
        let worst = max_gradient_error(&mut store, build);
        let took = begun.elapsed().as_secs_f64();
        assert!(worst < TOLERANCE, "seed {seed}: worst relative error {worst}");
        assert!(took < 10.0, "seed {seed}: gradient check took {took:.2}s (budget 10s)");
        worst_seen = worst_seen.max(worst);
        slowest = slowest.max(took);
        accepted += 1;
    }

    // --- LSTM cell in isolation ---
    let (h, d) = (3usize, 2usize);
    for seed in 0..SEEDS_REQUIRED as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mut store = ParamStore::new();
        for gate in ["W_f", "W_i", "W_c", "W_o"] {
            store
                .insert(gate, random_tensor(&mut rng, &[h, h + d], 0.8), true)
                .unwrap();
        }
        for bias in ["b_f", "b_i", "b_c", "b_o"] {
            store
                .insert(bias, random_tensor(&mut rng, &[h], 0.8), false)
                .unwrap();
        }
        store
            .insert("h_prev", random_tensor(&mut rng, &[batch, h], 0.8), false)
            .unwrap();
        store
            .insert("c_prev", random_tensor(&mut rng, &[batch, h], 0.8), false)
            .unwrap();
        store
            .insert("x", random_tensor(&mut rng, &[batch, d], 0.8), false)
            .unwrap();
        let readout = random_tensor(&mut rng, &[batch, h], 1.0);
        let mut shifted = readout.clone();
        for v in shifted.data_mut() {
            *v += 2.0;
        }
        let worst = max_gradient_error(&mut store, move |tape, bound| {
            let p = LstmLayerParams {
                w_f: bound.get("W_f")?,
                w_i: bound.get("W_i")?,
                w_c: bound.get("W_c")?,
                w_o: bound.get("W_o")?,
                b_f: bound.get("b_f")?,
                b_i: bound.get("b_i")?,
                b_c: bound.get("b_c")?,
                b_o: bound.get("b_o")?,
            };
            let state = LstmState {
                h: bound.get("h_prev")?,
                c: bound.get("c_prev")?,
            };
            let next =
                lstm_cell_step(tape, &p, bound.get("x")?, &state).map_err(layer_to_tensor)?;
            // Weight h and c differently so neither output is shadowed.
            let r1 = tape.leaf(readout.clone());
            let r2 = tape.leaf(shifted.clone());
            let hw = tape.mul(next.h, r1)?;
            let cw = tape.mul(next.c, r2)?;
            let both = tape.add(hw, cw)?;
            tape.sum_sq(both)
        });
        assert!(worst < TOLERANCE, "lstm cell seed {seed}: worst error {worst}");
    }

    // --- bidirectional layer in isolation ---
    let t_small = 3usize;
    let mut accepted = 0usize;
    let mut candidate = 0u64;
    while accepted < SEEDS_REQUIRED {
        assert!(candidate < 200, "kink guard exhausted the candidate roster");
        let seed = 2000 + candidate;
        candidate += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for dir in ["fwd", "bwd"] {
            for gate in ["W_f", "W_i", "W_c", "W_o"] {
                store
                    .insert(
                        &format!("{dir}.{gate}"),
                        random_tensor(&mut rng, &[h, h + d], 0.8),
                        true,
                    )
                    .unwrap();
            }
            for bias in ["b_f", "b_i", "b_c", "b_o"] {
                store
                    .insert(&format!("{dir}.{bias}"), random_tensor(&mut rng, &[h], 0.8), false)
                    .unwrap();
            }
        }
        store
            .insert("proj.W", random_tensor(&mut rng, &[h, 2 * h], 0.8), true)
            .unwrap();
        store
            .insert("proj.b", random_tensor(&mut rng, &[h], 0.8), false)
            .unwrap();
        store
            .insert("x", random_tensor(&mut rng, &[batch, t_small, d], 0.8), false)
            .unwrap();
        let readout = random_tensor(&mut rng, &[batch, t_small, h], 1.0);

        let build = move |tape: &mut Tape, bound: &BoundParams| -> Result<NodeId, TensorError> {
            let cell = |dir: &str, bound: &BoundParams| -> Result<LstmLayerParams, TensorError> {
                Ok(LstmLayerParams {
                    w_f: bound.get(&format!("{dir}.W_f"))?,
                    w_i: bound.get(&format!("{dir}.W_i"))?,
                    w_c: bound.get(&format!("{dir}.W_c"))?,
                    w_o: bound.get(&format!("{dir}.W_o"))?,
                    b_f: bound.get(&format!("{dir}.b_f"))?,
                    b_i: bound.get(&format!("{dir}.b_i"))?,
                    b_c: bound.get(&format!("{dir}.b_c"))?,
                    b_o: bound.get(&format!("{dir}.b_o"))?,
                })
            };
            let p = BidirLayerParams {
                forward_cell: cell("fwd", bound)?,
                backward_cell: Some(cell("bwd", bound)?),
                w_proj: bound.get("proj.W")?,
                b_proj: bound.get("proj.b")?,
            };
            let y = bidir_layer_forward(tape, &p, bound.get("x")?).map_err(layer_to_tensor)?;
            let r = tape.leaf(readout.clone());
            let weighted = tape.mul(y, r)?;
            tape.sum_sq(weighted)
        };

        let mut probe = Tape::new();
        let bound = store.bind(&mut probe);
        build(&mut probe, &bound).unwrap();
        let clearance = probe.relu_min_abs_input().unwrap_or(f64::INFINITY);
        drop(probe);
        if clearance < KINK_CLEARANCE {
            continue;
        }
        let worst = max_gradient_error(&mut store, build);
        assert!(worst < TOLERANCE, "bidir seed {seed}: worst error {worst}");
        accepted += 1;
    }

    // --- batch normalisation in isolation ---
    for seed in 0..SEEDS_REQUIRED as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        // Ramp over rows keeps per-feature variance well-conditioned.
        let mut x = random_tensor(&mut rng, &[batch, t_small, h], 0.3);
        for row in 0..batch * t_small {
            for col in 0..h {
                x.data_mut()[row * h + col] += row as f64;
            }
        }
        let mut store = ParamStore::new();
        store.insert("x", x, false).unwrap();
        store
            .insert("alpha", random_tensor(&mut rng, &[h], 1.0), false)
            .unwrap();
        store
            .insert("beta", random_tensor(&mut rng, &[h], 1.0), false)
            .unwrap();
        let readout = random_tensor(&mut rng, &[batch, t_small, h], 1.0);
        let worst = max_gradient_error(&mut store, move |tape, bound| {
            let mut running_mean = Tensor::zeros(&[h]);
            let mut running_var = Tensor::full(&[h], 1.0);
            let mut ctx = BnContext {
                params: BatchNormParams {
                    alpha: bound.get("alpha")?,
                    beta: bound.get("beta")?,
                },
                running_mean: &mut running_mean,
                running_var: &mut running_var,
                momentum: 0.99,
            };
            let y = batch_norm(tape, bound.get("x")?, &mut ctx, Mode::Train)
                .map_err(layer_to_tensor)?;
            let r = tape.leaf(readout.clone());
            let weighted = tape.mul(y, r)?;
            tape.sum_sq(weighted)
        });
        assert!(worst < TOLERANCE, "batch norm seed {seed}: worst error {worst}");
    }

    // --- classification loss in isolation ---
    for seed in 0..SEEDS_REQUIRED as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
        let (n, c) = (3usize, 4usize);
        let mut store = ParamStore::new();
        store
            .insert("logits", random_tensor(&mut rng, &[n, c], 4.0), false)
            .unwrap();
        // Keep decayed weights away from zero so 2*lambda*w stays above the
        // finite-difference noise floor.
        let mut w = random_tensor(&mut rng, &[2, 3], 1.0);
        for v in w.data_mut() {
            *v += if *v >= 0.0 { 0.5 } else { -0.5 };
        }
        store.insert("w", w, true).unwrap();
        let targets = one_hot_rows(&mut rng, n, c);
        let worst = max_gradient_error(&mut store, move |tape, bound| {
            classification_loss(tape, bound.get("logits")?, &targets, &[bound.get("w")?], 0.013)
                .map_err(loss_to_tensor)
        });
        assert!(worst < TOLERANCE, "loss seed {seed}: worst error {worst}");
    }

    println!(
        "[PASS] gate 1: gradients correct end-to-end over {SEEDS_REQUIRED} seeds \
         (worst rel err {worst_seen:.3e}, slowest check {slowest:.2}s) and for every \
         layer primitive in isolation"
    );
}

// ---------------------------------------------------------------------------
// Gate 2: metrics oracle
// ---------------------------------------------------------------------------

/// A fixed six-class confusion matrix with an independently computed score
/// card. The reference card's values are rounded to two decimals; the
/// metrics module must land within 0.01 percentage points of each, and the
/// weighted F1 within 0.1 points of the card's 93.54%.
///
/// One cell of the card is internally inconsistent: the SITTING recall is
/// recorded as 91.09%, but its own row says 426 correct of 468, which forces
/// 91.0256...%. No correct implementation can reproduce 91.09 from these
/// counts, so this gate asserts the arithmetically forced value and prints
/// the discrepancy instead of hiding it.
#[test]
fn gate_2_metrics_oracle() {
    let begun = Instant::now();

    #[rustfmt::skip]
    let counts: Vec<u64> = vec![
        476,   1,  20,   0,   0,   0,
         20, 429,  21,   0,   0,   0,
         14,   8, 398,   0,   0,   0,
          0,   5,   0, 426,  33,   4,
          0,   0,   0,  62, 473,   0,
          0,   0,   0,   0,   0, 537,
    ];
    let names: Vec<String> = data::UCI_CLASS_NAMES.iter().map(|s| s.to_string()).collect();
    let m = ConfusionMatrix::from_counts(counts, 6, Some(&names)).unwrap();

    assert_eq!(m.total(), 2927);
    assert_eq!(m.row_sums(), vec![497, 470, 420, 468, 535, 537]);
    assert_eq!(m.col_sums(), vec![510, 443, 439, 488, 506, 541]);

    let scores = m.scores().unwrap();
    let assert_margin = |label: &str, computed: f64, reference: f64| {
        let diff = (100.0 * computed - reference).abs();
        assert!(
            diff <= 0.01,
            "{label}: computed {:.4}% vs reference {reference}% (off by {diff:.4}pp)",
            100.0 * computed
        );
    };

    assert_margin("accuracy", scores.accuracy, 93.57);

    // Reference card, two decimals. The recall entry for SITTING is the
    // arithmetically forced 91.03, not the card's inconsistent 91.09.
    let reference_recall = [95.77, 91.28, 94.76, 91.03, 88.41, 100.00];
    let reference_precision = [93.33, 96.84, 90.66, 87.30, 93.48, 99.26];
    for (i, class) in scores.per_class.iter().enumerate() {
        assert_margin(
            &format!("recall[{}]", class.name),
            class.recall,
            reference_recall[i],
        );
        assert_margin(
            &format!("precision[{}]", class.name),
            class.precision,
            reference_precision[i],
        );
    }
    let sitting = &scores.per_class[3];
    let forced = 426.0 / 468.0;
    assert!(
        (sitting.recall - forced).abs() < 1e-12,
        "SITTING recall must be exactly 426/468"
    );
    println!(
        "[NOTE] gate 2: the reference card lists SITTING recall as 91.09%, but its own \
         row counts force 426/468 = {:.4}% — a transcription slip in the card; this gate \
         asserts the forced value",
        100.0 * forced
    );

    let f1_diff = (100.0 * scores.weighted_f1 - 93.54).abs();
    assert!(
        f1_diff <= 0.1,
        "weighted F1 {:.4}% vs reference 93.54% (off by {f1_diff:.4}pp)",
        100.0 * scores.weighted_f1
    );

    let took = begun.elapsed().as_secs_f64();
    assert!(took < 1.0, "metrics oracle took {took:.3}s (budget 1s)");
    println!(
        "[PASS] gate 2: score card reproduced — accuracy {:.4}%, weighted F1 {:.4}%, \
         11/12 per-class values within 0.01pp, SITTING recall at its forced value ({took:.3}s)",
        100.0 * scores.accuracy,
        100.0 * scores.weighted_f1
    );
}

// ---------------------------------------------------------------------------
// Gate 3: clipping invariant
// ---------------------------------------------------------------------------

/// Randomized gradient sets spanning seven orders of magnitude, clipped at
/// the training default of 15: the post-clip joint norm never exceeds
/// 15 + 1e-9, and gradients already inside the budget come back bitwise
/// untouched.
#[test]
fn gate_3_clipping_invariant() {
    const MAX_NORM: f64 = 15.0;
    let mut rng = ChaCha8Rng::seed_from_u64(0xC11);
    let mut clipped_cases = 0usize;
    let mut untouched_cases = 0usize;

    let mut run_case = |target_norm: f64, rng: &mut ChaCha8Rng| {
        let mut store = ParamStore::new();
        let params = rng.gen_range(1..=4);
        for i in 0..params {
            let dims = rng.gen_range(1..=2);
            let shape: Vec<usize> = (0..dims).map(|_| rng.gen_range(1..=6)).collect();
            store
                .insert(&format!("p{i}"), random_tensor(rng, &shape, 1.0), i == 0)
                .unwrap();
        }
        for (_, p) in store.iter_mut() {
            let shape = p.value.shape().to_vec();
            p.grad = random_tensor(rng, &shape, 1.0);
        }
        // Rescale the joint gradient onto the requested norm.
        let current = store.global_grad_norm();
        assert!(current > 0.0, "degenerate random gradient");
        store.scale_grads(target_norm / current);
        let before: Vec<u64> = store
            .iter()
            .flat_map(|(_, p)| p.grad.data().iter().map(|g| g.to_bits()))
            .collect();
        let pre_norm = store.global_grad_norm();

        let report = clip_gradients(&mut store, MAX_NORM).unwrap();
        let post_norm = store.global_grad_norm();
        assert!(
            post_norm <= MAX_NORM + 1e-9,
            "target {target_norm:.3e}: post-clip norm {post_norm} exceeds {MAX_NORM} + 1e-9"
        );
        let after: Vec<u64> = store
            .iter()
            .flat_map(|(_, p)| p.grad.data().iter().map(|g| g.to_bits()))
            .collect();
        if pre_norm <= MAX_NORM {
            assert!(!report.clipped, "norm {pre_norm} <= {MAX_NORM} must not clip");
            assert_eq!(before, after, "sub-threshold gradients must be bitwise unchanged");
            untouched_cases += 1;
        } else {
            assert!(report.clipped);
            clipped_cases += 1;
        }
    };

    // Log-uniform sweep over norms 0.1 .. 1e6.
    for _ in 0..200 {
        let exponent = rng.gen_range(-1.0f64..6.0);
        let target = 10f64.powf(exponent);
        run_case(target, &mut rng);
    }
    // Deterministic edges: the bottom and top of the sweep and points
    // straddling the threshold itself.
    for &target in &[0.1, 14.999, 15.0 + 1e-9, 15.1, 1e6] {
        run_case(target, &mut rng);
    }
    // A gradient landing exactly on the threshold is inside the budget.
    let mut store = ParamStore::new();
    store.insert("w", Tensor::zeros(&[1]), true).unwrap();
    store.get_mut("w").unwrap().grad = Tensor::full(&[1], 15.0);
    let report = clip_gradients(&mut store, MAX_NORM).unwrap();
    assert!(!report.clipped, "norm exactly 15 must pass through unclipped");
    assert_eq!(store.get("w").unwrap().grad.data()[0].to_bits(), 15.0f64.to_bits());

    assert!(clipped_cases > 0 && untouched_cases > 0, "sweep must exercise both sides");
    println!(
        "[PASS] gate 3: joint norm <= 15 + 1e-9 over {} randomized sets \
         ({clipped_cases} clipped, {untouched_cases} bitwise-untouched)",
        clipped_cases + untouched_cases
    );
}

// ---------------------------------------------------------------------------
// Gate 4: normalization and window arithmetic
// ---------------------------------------------------------------------------

/// Channel statistics land exactly on the target (mean 0 +- 1e-10, std
/// 0.5 +- 1e-10); window counts match the closed form floor((len-T)/step)+1
/// over 100 randomized cases; window labels match a brute-force enumerator.
#[test]
fn gate_4_normalization_and_windows() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xDA7A);

    // --- normalization onto mean 0, std 0.5 ---
    let channels = 4usize;
    let mut series = Vec::new();
    for _ in 0..3 {
        let steps = rng.gen_range(200..600);
        let offsets: Vec<f64> = (0..channels).map(|_| rng.gen_range(-1000.0..1000.0)).collect();
        let scales: Vec<f64> = (0..channels).map(|_| rng.gen_range(0.1..50.0)).collect();
        let mut values = Vec::with_capacity(steps * channels);
        for _ in 0..steps {
            for c in 0..channels {
                values.push(offsets[c] + scales[c] * (rng.gen::<f64>() * 2.0 - 1.0));
            }
        }
        series.push(RawSeries {
            values: Tensor::new(vec![steps, channels], values).unwrap(),
            labels: vec![0; steps],
        });
    }
    let stats = fit_normalizer(&series, 0.5).unwrap();
    assert!(stats.degenerate.is_empty(), "random channels must not degenerate");
    let normalized: Vec<RawSeries> = series
        .iter()
        .map(|s| data::apply_normalizer(&stats, s).unwrap())
        .collect();
    let total_steps: usize = normalized.iter().map(|s| s.steps()).sum();
    for c in 0..channels {
        let mut mean = 0.0;
        for s in &normalized {
            for row in s.values.data().chunks_exact(channels) {
                mean += row[c];
            }
        }
        mean /= total_steps as f64;
        let mut var = 0.0;
        for s in &normalized {
            for row in s.values.data().chunks_exact(channels) {
                let d = row[c] - mean;
                var += d * d;
            }
        }
        let std = (var / total_steps as f64).sqrt();
        assert!(mean.abs() <= 1e-10, "channel {c}: normalized mean {mean:e}");
        assert!((std - 0.5).abs() <= 1e-10, "channel {c}: normalized std {std}");
    }

    // --- window counts against the closed form, labels against brute force ---
    let classes = 5usize;
    for case in 0..100 {
        let len = rng.gen_range(1..400);
        let t = rng.gen_range(1..50);
        let overlap = match case % 5 {
            0 => 0.0,
            1 => 0.25,
            2 => 0.5,
            3 => 0.75,
            _ => rng.gen_range(0.0..0.99),
        };
        let labels: Vec<usize> = (0..len).map(|_| rng.gen_range(0..classes)).collect();
        let values: Vec<f64> = (0..len).map(|i| i as f64).collect();
        let s = RawSeries {
            values: Tensor::new(vec![len, 1], values).unwrap(),
            labels: labels.clone(),
        };
        let w = slide_windows(&s, t, overlap, classes).unwrap();
        let step = window_step(t, overlap);
        assert_eq!(w.step, step, "case {case}: stride disagrees");
        let expected_count = if len >= t { (len - t) / step + 1 } else { 0 };
        assert_eq!(
            w.len(),
            expected_count,
            "case {case}: len {len}, T {t}, overlap {overlap} -> step {step}"
        );

        // Brute force: walk each window and keep the label under the cursor;
        // the final step's label is the window's label.
        let mut expected_labels = Vec::new();
        let mut start = 0usize;
        while start + t <= len {
            let mut label = usize::MAX;
            for pos in start..start + t {
                label = labels[pos];
            }
            expected_labels.push(label);
            start += step;
        }
        assert_eq!(w.labels, expected_labels, "case {case}: window labels disagree");
    }

    println!(
        "[PASS] gate 4: channels normalized to mean 0 / std 0.5 within 1e-10; \
         100 window cases match floor((len-T)/step)+1 and the brute-force labeler"
    );
}

// ---------------------------------------------------------------------------
// Gate 5: determinism
// ---------------------------------------------------------------------------

/// Two CLI training runs with the same config and seed produce byte-identical
/// epoch tables and checkpoints (only the output directory differs), and a
/// run that evaluates every epoch learns exactly the same parameters as one
/// that evaluates only at the end.
#[test]
fn gate_5_determinism() {
    let scratch = tempfile::tempdir().unwrap();
    let conf_path = scratch.path().join("toy.conf");
    std::fs::write(
        &conf_path,
        "dataset.kind = toy\n\
         dataset.toy_train_per_class = 24\n\
         dataset.toy_test_per_class = 12\n\
         arch.shape = 1x1\n\
         arch.hidden_width = 6\n\
         arch.input_channels = 2\n\
         arch.num_classes = 2\n\
         arch.window_length = 8\n\
         train.batch_size = 16\n\
         train.epochs = 3\n\
         seed = 11\n",
    )
    .unwrap();

    let run = |out: &Path| {
        let output = Command::new(env!("CARGO_BIN_EXE_resbidir"))
            .arg("train")
            .arg(&conf_path)
            .arg("--output-dir")
            .arg(out)
            .output()
            .expect("binary runs");
        assert!(
            output.status.success(),
            "training run failed:\n{}",
            String::from_utf8_lossy(&output.stderr)
        );
    };
    let dir_a = scratch.path().join("a");
    let dir_b = scratch.path().join("b");
    run(&dir_a);
    run(&dir_b);

    for name in ["epoch_table.tsv", "trend.tsv", "final.ckpt", "best.ckpt", "stamp.txt"] {
        let a = std::fs::read(dir_a.join(name)).unwrap();
        let b = std::fs::read(dir_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }

    // Evaluation cadence must not steer training: same seed, evaluations
    // after every epoch versus only at the end, identical parameters.
    let dataset = toy_two_class(24, 12, 8, 2, 13);
    let arch = NetworkArchitecture {
        residual_blocks: 1,
        layers_per_block: 1,
        hidden_width: 6,
        input_channels: 2,
        num_classes: 2,
        window_length: 8,
        dropout_keep_prob: 0.9,
        dropout_position: DropoutPosition::OutputOnly,
        residual_skips: true,
        bidirectional: true,
        batch_norm: true,
        bn_beta_init: 0.0,
        bn_momentum: 0.99,
    };
    let run_with_cadence = |eval_every: usize| {
        let cfg = TrainConfig {
            batch_size: 16,
            epochs: 4,
            eval_every,
            seed: 9,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut model = Model::init(arch.clone(), &mut rng).unwrap();
        train(&mut model, &dataset, &cfg, &mut rng).unwrap();
        (model.params.values_snapshot(), model.buffers.clone())
    };
    let (params_every, buffers_every) = run_with_cadence(1);
    let (params_final, buffers_final) = run_with_cadence(4);
    assert_eq!(params_every, params_final, "extra evaluations changed the trajectory");
    assert_eq!(buffers_every, buffers_final);

    println!(
        "[PASS] gate 5: identical runs byte-identical (epoch table, trend, both \
         checkpoints, stamp); evaluation cadence leaves the trajectory untouched"
    );
}

// ---------------------------------------------------------------------------
// Gate 6: toy-set learning
// ---------------------------------------------------------------------------

/// Every architecture variant must actually learn: on the built-in toy task
/// (the sign of channel 0 at the final step decides the class) each of the
/// four variants reaches >= 99% test accuracy within 50 epochs, all four
/// runs together in under two minutes.
#[test]
fn gate_6_toy_learning() {
    let begun = Instant::now();
    let scratch = tempfile::tempdir().unwrap();

    let mut cfg = ExperimentConfig::default();
    cfg.dataset_kind = DatasetKind::Toy;
    cfg.toy_train_per_class = 100;
    cfg.toy_test_per_class = 50;
    cfg.arch.hidden_width = 8;
    cfg.arch.input_channels = 2;
    cfg.arch.num_classes = 2;
    cfg.arch.window_length = 16;
    cfg.arch.dropout_keep_prob = 1.0;
    cfg.train.learning_rate = 0.01;
    cfg.train.batch_size = 25;
    cfg.train.epochs = 50;
    cfg.train.eval_every = 1;
    cfg.train.seed = 7;
    cfg.output_dir = scratch.path().join("ablation").display().to_string();

    let outcomes = cmd_ablation(&cfg, false).unwrap();
    assert_eq!(outcomes.len(), 4);
    for v in &outcomes {
        let first_hit = v
            .outcome
            .run
            .reports
            .iter()
            .find(|r| r.test_accuracy >= 0.99)
            .map(|r| r.epoch);
        assert!(
            v.outcome.run.best_test_accuracy >= 0.99,
            "{}: best test accuracy {:.2}% never reached 99%",
            v.label,
            100.0 * v.outcome.run.best_test_accuracy
        );
        let epoch = first_hit.expect("an epoch must have crossed 99%");
        assert!(epoch <= 50, "{}: 99% reached only at epoch {epoch}", v.label);
    }

    let took = begun.elapsed().as_secs_f64();
    assert!(took < 120.0, "toy ablation took {took:.1}s (budget 120s)");
    let summary: Vec<String> = outcomes
        .iter()
        .map(|v| {
            let first = v
                .outcome
                .run
                .reports
                .iter()
                .find(|r| r.test_accuracy >= 0.99)
                .map(|r| r.epoch)
                .unwrap();
            format!("{} @ epoch {first}", v.label)
        })
        .collect();
    println!(
        "[PASS] gate 6: all variants >= 99% on the toy task ({}) in {took:.1}s",
        summary.join(", ")
    );
}

// ---------------------------------------------------------------------------
// Gate 7: desk-scale run on the real dataset
// ---------------------------------------------------------------------------

/// The shipped desk-scale configuration (2 blocks x 2 layers, 28 cells)
/// trained on the real UCI HAR corpus reaches >= 85% test accuracy within
/// its 25-epoch budget in at most an hour. The reference full-scale result
/// is 93.57% accuracy / 93.54% weighted F1; landing within 3 points of it is
/// reported as a full reproduction, not required. Skips loudly without the
/// dataset.
#[test]
fn gate_7_desk_scale_uci() {
    let Some(root) = uci_root() else {
        skip_uci("gate 7 (desk-scale training run)");
        return;
    };
    let begun = Instant::now();
    let scratch = tempfile::tempdir().unwrap();
    let cfg = desk_scale_config(&root, &scratch.path().join("uci"));
    assert_eq!(cfg.train.epochs, 25, "shipped desk-scale budget is 25 epochs");

    let outcome = cmd_train(&cfg, true).unwrap();
    let took = begun.elapsed().as_secs_f64();
    assert!(outcome.run.abort.is_none(), "desk-scale run aborted: {:?}", outcome.run.abort);
    assert!(
        took <= 3600.0,
        "desk-scale run took {:.0}s (budget one hour)",
        took
    );

    let best = outcome.run.best_test_accuracy;
    assert!(
        best >= 0.85,
        "best test accuracy {:.2}% below the 85% desk-scale bar",
        100.0 * best
    );

    // The confusion matrix must cover all six classes with every test
    // window accounted for: row sums equal the test-split class supports.
    let data = load_dataset(&cfg).unwrap();
    let mut supports = vec![0u64; 6];
    for &l in &data.test.labels {
        supports[l] += 1;
    }
    assert_eq!(outcome.eval.confusion.classes(), 6);
    assert_eq!(
        outcome.eval.confusion.row_sums(),
        supports,
        "confusion rows must sum to the test-split supports"
    );

    if 100.0 * best >= 93.57 - 3.0 {
        println!(
            "[NOTE] gate 7: best accuracy {:.2}% is within 3 points of the 93.57% \
             reference — full reproduction at desk scale",
            100.0 * best
        );
    }
    println!(
        "[PASS] gate 7: desk-scale run hit {:.2}% best test accuracy (final {:.2}%, \
         weighted F1 {:.2}%) in {:.0}s",
        100.0 * best,
        100.0 * outcome.run.final_test_accuracy,
        100.0 * outcome.eval.weighted_f1,
        took
    );
}

// ---------------------------------------------------------------------------
// Gate 8: variant ordering on the real dataset (soft)
// ---------------------------------------------------------------------------

/// The full architecture should not lose to the plain LSTM baseline: median
/// test accuracy over three seeds, full variant >= baseline - 0.5pp. Runs on
/// a reduced budget (3 epochs per run) to stay tractable; because early
/// training can favour the shallower model, a small inversion only warns —
/// the gate fails hard only when the full variant trails by more than five
/// points, which would signal a real defect rather than noise. Skips loudly
/// without the dataset.
#[test]
fn gate_8_variant_ordering() {
    let Some(root) = uci_root() else {
        skip_uci("gate 8 (variant ordering)");
        return;
    };
    let scratch = tempfile::tempdir().unwrap();
    let base = desk_scale_config(&root, scratch.path());

    let median_accuracy = |bidirectional: bool, dressing: bool, slug: &str| -> f64 {
        let mut finals: Vec<f64> = [42u64, 43, 44]
            .iter()
            .map(|&seed| {
                let mut cfg = base.clone();
                cfg.arch.bidirectional = bidirectional;
                cfg.arch.residual_skips = dressing;
                cfg.arch.batch_norm = dressing;
                cfg.train.epochs = 3; // reduced budget: ordering, not margins
                cfg.train.seed = seed;
                cfg.output_dir = scratch
                    .path()
                    .join(format!("{slug}_{seed}"))
                    .display()
                    .to_string();
                let outcome = cmd_train(&cfg, false).unwrap();
                assert!(outcome.run.abort.is_none(), "{slug} seed {seed} aborted");
                outcome.run.final_test_accuracy
            })
            .collect();
        finals.sort_by(|a, b| a.total_cmp(b));
        finals[1]
    };

    let baseline = median_accuracy(false, false, "lstm");
    let full = median_accuracy(true, true, "deep_res_bidir");
    println!(
        "[NOTE] gate 8: reduced budget (3 epochs/run, 3 seeds) — median test accuracy \
         baseline LSTM {:.2}%, full variant {:.2}%",
        100.0 * baseline,
        100.0 * full
    );

    if full < baseline - 0.005 {
        let msg = format!(
            "[WARN] gate 8: full variant trails the baseline by {:.2}pp on the reduced \
             budget (soft gate: warning only)",
            100.0 * (baseline - full)
        );
        println!("{msg}");
        eprintln!("{msg}");
    }
    assert!(
        full >= baseline - 0.05,
        "full variant trails the baseline by {:.2}pp — beyond noise, likely a defect",
        100.0 * (baseline - full)
    );
    println!(
        "[PASS] gate 8: variant ordering holds within the soft margin (baseline {:.2}%, \
         full {:.2}%)",
        100.0 * baseline,
        100.0 * full
    );
}
