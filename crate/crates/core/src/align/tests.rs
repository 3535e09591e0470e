use approx::assert_abs_diff_eq;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::normal;
use crate::encoders::Backbone;
use crate::fixtures::tiny;
use crate::gradcheck::{check_inputs, check_params};

fn constant(tape: &mut Tape, rows: &[Vec<f64>]) -> Var {
    tape.constant(Tensor::from_rows(rows).unwrap(), "c").unwrap()
}

fn subs(tape: &mut Tape, vecs: &[[f64; 2]]) -> Var {
    let data: Vec<f64> = vecs.iter().flatten().copied().collect();
    tape.constant(Tensor::new(vec![1, vecs.len(), 2], data).unwrap(), "subs").unwrap()
}

fn nce(rows: &[Vec<f64>], tau: f64) -> f64 {
    let mut tape = Tape::new(false, 0);
    let s = constant(&mut tape, rows);
    let l = infonce(&mut tape, s, tau).unwrap();
    tape.value(l).item()
}

#[test]
fn maxsim_hand_examples() {
    let v = |a: [f64; 2]| a.to_vec();
    assert_abs_diff_eq!(maxsim(&[v([1.0, 0.0]), v([0.0, 1.0])], &[v([0.6, 0.8]), v([1.0, 0.0])]), 1.8, epsilon = 1e-12);
    let i = [v([1.0, 0.0]), v([1.0, 0.0])];
    let j = [v([0.0, 1.0]), v([0.6, 0.8])];
    assert_abs_diff_eq!(maxsim(&i, &j), 1.2, epsilon = 1e-12);
    assert_abs_diff_eq!(maxsim(&j, &i), 0.6, epsilon = 1e-12);
    assert_abs_diff_eq!(maxsim(&[v([0.3, -2.0])], &[v([1.5, 0.5])]), 0.45 - 1.0, epsilon = 1e-12);
}

#[test]
fn maxsim_matrix_matches_scalar_form() {
    let mut tape = Tape::new(false, 0);
    let i = subs(&mut tape, &[[1.0, 0.0], [1.0, 0.0]]);
    let j = subs(&mut tape, &[[0.0, 1.0], [0.6, 0.8]]);
    let ij = maxsim_matrix(&mut tape, i, j).unwrap();
    let ji = maxsim_matrix(&mut tape, j, i).unwrap();
    assert_abs_diff_eq!(tape.value(ij).item(), 1.2, epsilon = 1e-12);
    assert_abs_diff_eq!(tape.value(ji).item(), 0.6, epsilon = 1e-12);
}

#[test]
fn cosine_cases() {
    assert_abs_diff_eq!(cosine(&[0.3, 0.4], &[0.3, 0.4]), 1.0, epsilon = 1e-15);
    assert_eq!(cosine(&[1.0, 0.0], &[0.0, 2.0]), 0.0);
    assert_eq!(cosine(&[1.0, 0.0], &[-1.0, 0.0]), -1.0);
    assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), 0.0);
}

#[test]
fn infonce_oracles() {
    assert_abs_diff_eq!(nce(&[vec![1.0, 0.0], vec![0.0, 1.0]], 1.0), (1.0 + (-1.0f64).exp()).ln(), epsilon = 1e-10);
    assert_eq!(nce(&[vec![3.7]], 0.7), 0.0);
    let flat = vec![vec![0.4; 5]; 5];
    assert_abs_diff_eq!(nce(&flat, 0.7), 5f64.ln(), epsilon = 1e-12);
}

#[test]
fn infonce_rejects_bad_input() {
    let mut tape = Tape::new(false, 0);
    let s = constant(&mut tape, &[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
    assert!(infonce(&mut tape, s, 1.0).is_err());
    let sq = constant(&mut tape, &[vec![1.0]]);
    assert!(infonce(&mut tape, sq, 0.0).is_err());
}

#[test]
fn row_shift_leaves_loss_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let base = normal(&mut rng, &[6, 6], 1.0);
    let rows: Vec<Vec<f64>> = (0..6).map(|i| base.row(i).to_vec()).collect();
    let mut shifted = rows.clone();
    for (i, r) in shifted.iter_mut().enumerate() {
        r.iter_mut().for_each(|v| *v += 3.0 * i as f64 - 7.0);
    }
    assert_abs_diff_eq!(nce(&rows, 0.7), nce(&shifted, 0.7), epsilon = 1e-10);
    assert!(nce(&rows, 0.7) >= 0.0);
}

#[test]
fn symmetric_matrix_gives_equal_directions() {
    let mut tape = Tape::new(false, 0);
    let s = constant(&mut tape, &[vec![0.9, 0.1, -0.2], vec![0.1, 0.5, 0.3], vec![-0.2, 0.3, 0.8]]);
    let st = tape.transpose(s).unwrap();
    let a = infonce_text2tab(&mut tape, s, 0.7).unwrap();
    let b = infonce_tab2text(&mut tape, st, 0.7).unwrap();
    assert_eq!(tape.value(a).item(), tape.value(b).item());
}

#[test]
fn asymmetric_maxsim_gives_different_directions() {
    let mut tape = Tape::new(false, 0);
    // Row 0 of each side is the asymmetry witness; row 1 is a shared filler.
    let text = tape
        .constant(Tensor::new(vec![2, 2, 2], vec![1.0, 0.0, 1.0, 0.0, 0.0, -1.0, -1.0, 0.0]).unwrap(), "t")
        .unwrap();
    let tab = tape
        .constant(Tensor::new(vec![2, 2, 2], vec![0.0, 1.0, 0.6, 0.8, 0.0, -1.0, -1.0, 0.0]).unwrap(), "b")
        .unwrap();
    let s_text = maxsim_matrix(&mut tape, text, tab).unwrap();
    let s_tab = maxsim_matrix(&mut tape, tab, text).unwrap();
    assert_abs_diff_eq!(tape.data(s_text)[0], 1.2, epsilon = 1e-12);
    assert_abs_diff_eq!(tape.data(s_tab)[0], 0.6, epsilon = 1e-12);
    let a = infonce_text2tab(&mut tape, s_text, 1.0).unwrap();
    let b = infonce_tab2text(&mut tape, s_tab, 1.0).unwrap();
    assert!((tape.value(a).item() - tape.value(b).item()).abs() > 1e-3);
}

#[test]
fn ccl_is_the_mean() {
    let mut tape = Tape::new(false, 0);
    let a = tape.constant(Tensor::scalar(0.4), "a").unwrap();
    let b = tape.constant(Tensor::scalar(0.6), "b").unwrap();
    let t = ccl_combine(&mut tape, a, b).unwrap();
    assert_abs_diff_eq!(tape.value(t.loss).item(), 0.5, epsilon = 1e-12);
}

fn cosine_model(cfg_tau: f64) -> AlignmentModel {
    let data = tiny(3, 3, 4, 0);
    let cfg = AlignConfig {
        similarity: Similarity::Cosine,
        temperature: cfg_tau,
        proj_dim: 2,
        ..AlignConfig::default()
    };
    AlignmentModel::new(&data.schema, data.tokenizer.vocab_size(), &small_collab(Backbone::Mlp), &small_text(), &cfg, 0).unwrap()
}

#[test]
fn aligned_orthogonal_pairs_in_cosine_mode() {
    let model = cosine_model(1.0);
    let mut tape = Tape::new(false, 0);
    let h = constant(&mut tape, &[vec![1.0, 0.0], vec![0.0, 1.0]]);
    let t = model.ccl_projected(&mut tape, h, h).unwrap();
    let expect = (1.0 + (-1.0f64).exp()).ln();
    assert_abs_diff_eq!(tape.value(t.text2tab).item(), expect, epsilon = 1e-12);
    assert_abs_diff_eq!(tape.value(t.tab2text).item(), expect, epsilon = 1e-12);
    assert_abs_diff_eq!(tape.value(t.loss).item(), expect, epsilon = 1e-12);

    let flat = cosine_model(1e9);
    let t = flat.ccl_projected(&mut tape, h, h).unwrap();
    assert_abs_diff_eq!(tape.value(t.loss).item(), 2f64.ln(), epsilon = 1e-8);
}

#[test]
fn projection_identity_and_zero() {
    let mut store = ParamStore::new();
    let head = ProjectionHead::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), "p", 3, 3);
    store.set(head.linear.weight, Tensor::identity(3));
    let mut tape = Tape::new(false, 0);
    let x = constant(&mut tape, &[vec![1.0, -2.0, 0.5], vec![0.0, 3.0, 1.0]]);
    let y = head.project(&mut tape, &store, x).unwrap();
    assert_eq!(tape.data(y), tape.data(x));

    store.set(head.linear.weight, Tensor::zeros(&[3, 3]));
    store.set(head.linear.bias, Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
    let y = head.project(&mut tape, &store, x).unwrap();
    assert_eq!(tape.data(y), &[0.1, 0.2, 0.3, 0.1, 0.2, 0.3]);

    let wrong = constant(&mut tape, &[vec![1.0, 2.0]]);
    assert!(head.project(&mut tape, &store, wrong).is_err());
    assert_eq!(AlignConfig::default().proj_dim, 128);
}

#[test]
fn subspace_contracts() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let one = SubspaceHead::new(&mut store, &mut rng, "s1", 2, 1, true).unwrap();
    store.set(one.linear.weight, Tensor::identity(2));
    let mut tape = Tape::new(false, 0);
    let x = constant(&mut tape, &[vec![0.6, 0.8]]);
    let y = one.subspaces(&mut tape, &store, x).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 2]);
    assert_eq!(tape.data(y), &[0.6, 0.8]);

    let four = SubspaceHead::new(&mut store, &mut rng, "s4", 128, 4, true).unwrap();
    assert_eq!(four.sub_dim(), 32);
    let h = tape.constant(normal(&mut rng, &[5, 128], 1.0), "h").unwrap();
    let y = four.subspaces(&mut tape, &store, h).unwrap();
    for v in tape.data(y).chunks(32) {
        assert_abs_diff_eq!(v.iter().map(|a| a * a).sum::<f64>().sqrt(), 1.0, epsilon = 1e-12);
    }
    let self_sim = maxsim_matrix(&mut tape, y, y).unwrap();
    for i in 0..5 {
        assert!(tape.data(self_sim)[i * 5 + i] >= 4.0 - 1e-10);
    }
    assert!(SubspaceHead::new(&mut store, &mut rng, "bad", 10, 3, true).is_err());
}

#[test]
fn cosine_mode_equals_direct_cosine() {
    let model = cosine_model(0.7);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = normal(&mut rng, &[4, 2], 1.0);
    let b = normal(&mut rng, &[4, 2], 1.0);
    let mut tape = Tape::new(false, 0);
    let (va, vb) = (tape.constant(a.clone(), "a").unwrap(), tape.constant(b.clone(), "b").unwrap());
    let (s_text, s_tab) = model.similarities(&mut tape, va, vb).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            assert_abs_diff_eq!(tape.data(s_text)[i * 4 + j], cosine(b.row(i), a.row(j)), epsilon = 1e-12);
            assert_abs_diff_eq!(tape.data(s_tab)[i * 4 + j], cosine(a.row(i), b.row(j)), epsilon = 1e-12);
        }
    }
}

pub(crate) fn small_collab(backbone: Backbone) -> CollabConfig {
    CollabConfig {
        backbone,
        embed_dim: 4,
        hidden: vec![8, 6],
        attention_layers: 1,
        attention_heads: 2,
        head_dim: 2,
        cross_layers: 1,
        batch_norm: true,
        dropout: 0.0,
    }
}

pub(crate) fn small_text() -> TextConfig {
    TextConfig {
        dim: 8,
        layers: 1,
        heads: 2,
        ff_dim: 8,
        max_len: 32,
    }
}

fn small_align(similarity: Similarity) -> AlignConfig {
    AlignConfig {
        similarity,
        batch_size: 8,
        proj_dim: 8,
        subspaces: 2,
        epochs: 2,
        schedule: WarmupSchedule {
            start_lr: 1e-3,
            peak_lr: 5e-3,
            warmup_steps: 4,
        },
        ..AlignConfig::default()
    }
}

#[test]
fn both_towers_receive_gradients() {
    let d = tiny(4, 5, 16, 3);
    for sim in [Similarity::MaxSim, Similarity::Cosine] {
        let model = AlignmentModel::new(&d.schema, d.tokenizer.vocab_size(), &small_collab(Backbone::AutoInt), &small_text(), &small_align(sim), 1).unwrap();
        let data = AlignData {
            schema: &d.schema,
            rows: &d.rows,
            prompts: &d.prompts,
        };
        let (batch, tokens) = data.batch(&(0..8).collect::<Vec<_>>()).unwrap();
        let mut tape = Tape::new(true, 0);
        let t = model.ccl(&mut tape, &batch, &tokens).unwrap();
        let grads = tape.backward(t.loss).unwrap().params(&tape);
        for prefix in ["col.", "text.", "align.tab_proj", "align.text_proj"] {
            let best = model
                .store
                .ids_with_prefix(prefix)
                .filter(|&id| model.store.get(id).trainable)
                .map(|id| grads.norm(id))
                .fold(0.0, f64::max);
            assert!(best > 0.0, "{sim}: no gradient under {prefix}");
        }
    }
}

#[test]
fn heads_and_ccl_pass_gradient_checks() {
    let d = tiny(4, 5, 16, 3);
    for sim in [Similarity::MaxSim, Similarity::Cosine] {
        let model = AlignmentModel::new(&d.schema, d.tokenizer.vocab_size(), &small_collab(Backbone::Dcn), &small_text(), &small_align(sim), 2).unwrap();
        let data = AlignData {
            schema: &d.schema,
            rows: &d.rows,
            prompts: &d.prompts,
        };
        let (batch, tokens) = data.batch(&(0..6).collect::<Vec<_>>()).unwrap();
        let report = check_params(&model.store, 5, 3, |tape, st| {
            Ok(model.net.ccl(tape, st, &batch, &tokens)?.loss)
        })
        .unwrap();
        let worst = report.worst().unwrap();
        assert!(worst.rel_error < 1e-4, "{sim}: {} {}", worst.name, worst.rel_error);
    }
}

#[test]
fn infonce_input_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = normal(&mut rng, &[5, 5], 1.0);
    let report = check_inputs(&[s], |tape, v| infonce(tape, v[0], 0.7)).unwrap();
    assert!(report.max_rel_error() < 1e-4);
}

fn run(lr: f64, seed: u64) -> (AlignmentModel, AlignReport) {
    let d = tiny(4, 5, 32, 5);
    let mut cfg = small_align(Similarity::MaxSim);
    if lr == 0.0 {
        cfg.schedule = WarmupSchedule::constant(0.0);
    }
    let mut model = AlignmentModel::new(&d.schema, d.tokenizer.vocab_size(), &small_collab(Backbone::AutoInt), &small_text(), &cfg, seed).unwrap();
    let data = AlignData {
        schema: &d.schema,
        rows: &d.rows,
        prompts: &d.prompts,
    };
    let report = align_train(&mut model, &data, seed).unwrap();
    (model, report)
}

#[test]
fn zero_learning_rate_keeps_loss() {
    let d = tiny(4, 5, 32, 5);
    let data = AlignData {
        schema: &d.schema,
        rows: &d.rows,
        prompts: &d.prompts,
    };
    let (batch, tokens) = data.batch(&(0..8).collect::<Vec<_>>()).unwrap();
    let cfg = AlignConfig {
        schedule: WarmupSchedule::constant(0.0),
        ..small_align(Similarity::MaxSim)
    };
    let fresh = AlignmentModel::new(&d.schema, d.tokenizer.vocab_size(), &small_collab(Backbone::AutoInt), &small_text(), &cfg, 7).unwrap();
    let mut trained = fresh.clone();
    align_train(&mut trained, &data, 7).unwrap();
    let loss = |m: &AlignmentModel| {
        let mut tape = Tape::new(true, 1);
        let t = m.ccl(&mut tape, &batch, &tokens).unwrap();
        tape.value(t.loss).item()
    };
    assert_eq!(loss(&fresh), loss(&trained));
}

#[test]
fn training_is_deterministic_and_logs_every_step() {
    let (_, a) = run(1.0, 3);
    let (_, b) = run(1.0, 3);
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.curve.len(), 2 * 4);
    assert_eq!(a.curve[0].lr, 1e-3);
    for p in &a.curve {
        assert_abs_diff_eq!(p.loss, 0.5 * (p.l_t2t + p.l_tab2text), epsilon = 1e-12);
    }
}

#[test]
fn too_few_rows_for_a_batch() {
    let d = tiny(4, 5, 4, 5);
    let mut model = AlignmentModel::new(&d.schema, d.tokenizer.vocab_size(), &small_collab(Backbone::Mlp), &small_text(), &small_align(Similarity::Cosine), 0).unwrap();
    let data = AlignData {
        schema: &d.schema,
        rows: &d.rows,
        prompts: &d.prompts,
    };
    assert!(align_train(&mut model, &data, 0).is_err());
}

#[test]
fn gap_of_identical_sets() {
    let t = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.0]).unwrap();
    let g = alignment_gap(&t, &t).unwrap();
    assert_abs_diff_eq!(g.paired, 1.0, epsilon = 1e-15);
    assert_abs_diff_eq!(g.unpaired, -1.0 / 3.0, epsilon = 1e-15);
}
