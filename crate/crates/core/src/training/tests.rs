use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffmath::{grad_check_coords, OptimizerState, Tape, Tensor, Var};
use crate::error::Error;
use crate::motion::{synth_group_dataset, GroupSample, SkeletonKind, SynthConfig};
use crate::networks::{Latent, LatentMode, ModelConfig, PdvaeModel};
use crate::phase::PhaseDistribution;

fn toy_model_config() -> ModelConfig {
    ModelConfig {
        layers: 1,
        hidden: 16,
        heads: 2,
        ffn: 16,
        channels: 4,
        cond_dim: 3,
        joints: 2,
        frames: 16,
        sigma_hidden: 6,
        traj_hidden: 6,
        ..ModelConfig::default()
    }
}

fn toy_data(groups: usize, seed: u64) -> Vec<GroupSample> {
    let synth = SynthConfig {
        groups,
        dancers: 3,
        frames: 16,
        skeleton: SkeletonKind::Chain2,
        styles: 1,
        ..SynthConfig::default()
    };
    synth_group_dataset(&synth, seed).unwrap()
}

fn toy_train(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        batch_groups: 2,
        seed: 4,
        adam: crate::diffmath::AdamConfig { lr: 1e-3, ..Default::default() },
        ..TrainConfig::default()
    }
}

fn column<'t>(tape: &'t Tape, v: &[f64]) -> Var<'t> {
    tape.constant(Tensor::new(&[v.len(), 1], v.to_vec()).unwrap())
}

fn dist<'t>(tape: &'t Tape, v: [&[f64]; 6]) -> PhaseDistribution<'t> {
    PhaseDistribution {
        mu_a: column(tape, v[0]),
        mu_f: column(tape, v[1]),
        mu_b: column(tape, v[2]),
        mu_s: column(tape, v[3]),
        sigma_a: column(tape, v[4]),
        sigma_s: column(tape, v[5]),
    }
}

fn latent<'t>(tape: &'t Tape, d: PhaseDistribution<'t>, frames: usize) -> Latent<'t> {
    let c = d.channels();
    Latent { curves: tape.constant(Tensor::zeros(&[c, frames])), dist: d }
}

#[test]
fn reconstruction_closed_forms() {
    let tape = Tape::new();
    let t = tape.constant(Tensor::full(&[3, 4], 0.3));
    let at = |d: f64| loss_reconstruction(tape.constant(Tensor::full(&[3, 4], 0.3 + d)), t).unwrap().item();
    assert_eq!(at(0.0), 0.0);
    assert!((at(0.5) - 0.125).abs() < 1e-12);
    assert!((at(2.0) - 1.5).abs() < 1e-12);
    assert!((at(-2.0) - 1.5).abs() < 1e-12);
    let bad = tape.constant(Tensor::zeros(&[4, 3]));
    assert!(matches!(loss_reconstruction(bad, t), Err(Error::Shape(_))));
}

#[test]
fn kl_closed_forms() {
    let tape = Tape::new();
    let p = dist(&tape, [&[0.0], &[0.1], &[0.2], &[0.3], &[1.0], &[0.5]]);
    assert_eq!(loss_kl(&p, &p).unwrap().item(), 0.0);
    let q = dist(&tape, [&[1.0], &[0.1], &[0.2], &[0.3], &[1.0], &[0.5]]);
    assert!((loss_kl(&q, &p).unwrap().item() - 0.5).abs() < 1e-12);
    let short = dist(&tape, [&[0.0, 0.0], &[0.0, 0.0], &[0.0, 0.0], &[0.0, 0.0], &[1.0, 1.0], &[1.0, 1.0]]);
    assert!(loss_kl(&short, &p).is_err());
}

fn naive_gauss_kl(mq: f64, sq: f64, mp: f64, sp: f64) -> f64 {
    (sp / sq).ln() + (sq * sq + (mq - mp) * (mq - mp)) / (2.0 * sp * sp) - 0.5
}

#[test]
fn kl_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d = 5;
    let mut draw = |lo: f64, hi: f64| -> Vec<f64> { (0..d).map(|_| rng.random_range(lo..hi)).collect() };
    let q: Vec<Vec<f64>> = vec![draw(0.0, 2.0), draw(0.0, 0.5), draw(-1.0, 1.0), draw(-0.5, 0.5), draw(0.1, 2.0), draw(0.1, 2.0)];
    let p: Vec<Vec<f64>> = vec![draw(0.0, 2.0), draw(0.0, 0.5), draw(-1.0, 1.0), draw(-0.5, 0.5), draw(0.1, 2.0), draw(0.1, 2.0)];
    let mut expected = 0.0;
    for c in 0..d {
        expected += naive_gauss_kl(q[0][c], q[4][c], p[0][c], p[4][c]);
        expected += naive_gauss_kl(q[3][c], q[5][c], p[3][c], p[5][c]);
        expected += 0.5 * (q[1][c] - p[1][c]).powi(2);
        expected += 0.5 * (q[2][c] - p[2][c]).powi(2);
    }
    let tape = Tape::new();
    let dq = dist(&tape, [&q[0], &q[1], &q[2], &q[3], &q[4], &q[5]]);
    let dp = dist(&tape, [&p[0], &p[1], &p[2], &p[3], &p[4], &p[5]]);
    let got = loss_kl(&dq, &dp).unwrap().item();
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    assert!(got >= 0.0);
}

fn points<'t>(ls: &[Latent<'t>]) -> Vec<Var<'t>> {
    ls.iter().map(|l| consistency_point(l, LatentMode::Phase).unwrap()).collect()
}

#[test]
fn consistency_closed_forms() {
    let tape = Tape::new();
    let a = latent(&tape, dist(&tape, [&[0.7], &[0.1], &[0.0], &[0.2], &[1.0], &[0.5]]), 8);
    let all = [(0, 1), (1, 0)];
    let same = loss_consistency(&tape, &[a, a], &points(&[a, a]), &all, LatentMode::Phase).unwrap();
    assert_eq!(same.item(), 0.0);

    // equal distributions, manifold points one unit apart in one coordinate
    let p = tape.constant(Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap());
    let q = tape.constant(Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap());
    let unit = loss_consistency(&tape, &[a, a], &[p, q], &all, LatentMode::Phase).unwrap();
    assert!((unit.item() - 1.0).abs() < 1e-12);

    assert_eq!(loss_consistency(&tape, &[a], &points(&[a]), &[], LatentMode::Phase).unwrap().item(), 0.0);
    assert!(loss_consistency(&tape, &[a, a], &[p], &all, LatentMode::Phase).is_err());
    assert!(loss_consistency(&tape, &[a, a], &[p, q], &[(0, 2)], LatentMode::Phase).is_err());
}

#[test]
fn consistency_uses_noise_free_manifold_points() {
    let tape = Tape::new();
    let a = dist(&tape, [&[1.0], &[0.1], &[0.0], &[0.0], &[1.0], &[1.0]]);
    let b = dist(&tape, [&[1.0], &[0.1], &[0.0], &[0.5], &[1.0], &[1.0]]);
    let ls = [latent(&tape, a, 8), latent(&tape, b, 8)];
    let kl = loss_kl(&a, &b).unwrap().item();
    assert!((kl - 0.125).abs() < 1e-12);
    // points (0, 1) and (0, -1): squared distance 4
    let got = loss_consistency(&tape, &ls, &points(&ls), &[(0, 1)], LatentMode::Phase).unwrap().item();
    assert!((got - (kl + 4.0)).abs() < 1e-12);
}

#[test]
fn consistency_three_dancer_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tape = Tape::new();
    let mut make = || {
        let v: Vec<Vec<f64>> = (0..6)
            .map(|k| (0..3).map(|_| if k >= 4 { rng.random_range(0.2..1.5) } else { rng.random_range(0.0..1.0) }).collect())
            .collect();
        latent(&tape, dist(&tape, [&v[0], &v[1], &v[2], &v[3], &v[4], &v[5]]), 8)
    };
    let ls = [make(), make(), make()];
    let pts = points(&ls);
    let pairs = select_pairs(3, Pairing::AllPairs, &mut rng);
    assert_eq!(pairs.len(), 6);
    let got = loss_consistency(&tape, &ls, &pts, &pairs, LatentMode::Phase).unwrap().item();
    let mut expected = 0.0;
    for (m, n) in [(0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1)] {
        expected += loss_kl(&ls[m].dist, &ls[n].dist).unwrap().item();
        let (p, q) = (pts[m].value(), pts[n].value());
        expected += p.data().iter().zip(q.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    }
    expected /= 6.0;
    assert!((got - expected).abs() < 1e-12);
}

#[test]
fn random_pair_is_ordered_and_distinct() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let p = select_pairs(4, Pairing::RandomPair, &mut rng);
        assert_eq!(p.len(), 1);
        assert_ne!(p[0].0, p[0].1);
        assert!(p[0].0 < 4 && p[0].1 < 4);
    }
    assert!(select_pairs(1, Pairing::AllPairs, &mut rng).is_empty());
}

fn loss_record(model: &PdvaeModel, data: &[GroupSample], weights: LossWeights, ablation: Ablation) -> TrainRecord {
    let tape = Tape::new();
    let bound = model.bind_frozen(&tape);
    let batch: Vec<&GroupSample> = data.iter().collect();
    let mut r1 = ChaCha8Rng::seed_from_u64(9);
    let mut r2 = ChaCha8Rng::seed_from_u64(10);
    total_loss(&tape, &bound, model, &batch, &weights, &ablation, Pairing::AllPairs, &mut r1, &mut r2)
        .unwrap()
        .record(0)
}

#[test]
fn total_loss_flags_and_bookkeeping() {
    let model = PdvaeModel::new(toy_model_config(), 1).unwrap();
    let data = toy_data(2, 2);
    let w = LossWeights { kl: 0.3, consistency: 0.7 };
    let full = loss_record(&model, &data, w, Ablation::default());
    assert!(full.csc > 0.0 && full.kl > 0.0 && full.rec > 0.0);
    assert!((full.total - (full.rec + w.kl * full.kl + w.consistency * full.csc)).abs() < 1e-12);

    let off = loss_record(&model, &data, w, Ablation { disable_consistency: true, ..Default::default() });
    assert_eq!(off.csc, 0.0);
    assert_eq!(off.rec, full.rec);

    let zero = loss_record(&model, &data, LossWeights { kl: 0.0, consistency: 0.0 }, Ablation::default());
    assert_eq!(zero.total, zero.rec);

    let direct = loss_record(&model, &data, w, Ablation { disable_phase_manifold: true, ..Default::default() });
    assert!(direct.is_finite() && direct.kl >= 0.0 && direct.csc >= 0.0);
    assert!((direct.total - (direct.rec + w.kl * direct.kl + w.consistency * direct.csc)).abs() < 1e-12);
}

#[test]
fn total_loss_gradient_check() {
    let model = PdvaeModel::new(toy_model_config(), 3).unwrap();
    let data = toy_data(1, 5);
    let flat = model.params().flatten();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let coords: Vec<usize> = (0..flat.numel()).filter(|_| rng.random_bool(0.03)).collect();
    for ablation in [Ablation::default(), Ablation { disable_phase_manifold: true, ..Default::default() }] {
        let err = grad_check_coords(
            |x| {
                let tape = x.tape();
                let b = model.params().bind_flat(x)?;
                let batch: Vec<&GroupSample> = data.iter().collect();
                let mut r1 = ChaCha8Rng::seed_from_u64(7);
                let mut r2 = ChaCha8Rng::seed_from_u64(8);
                let w = LossWeights { kl: 0.1, consistency: 0.1 };
                Ok(total_loss(tape, &b, &model, &batch, &w, &ablation, Pairing::AllPairs, &mut r1, &mut r2)?.total)
            },
            &flat,
            1e-5,
            &coords,
        )
        .unwrap();
        assert!(err <= 1e-4, "{ablation:?}: relative error {err}");
    }
}

#[test]
fn batches_cover_each_epoch() {
    for step in 0..3 {
        let mut seen: Vec<usize> = (0..2).flat_map(|k| batch_indices(5, 5, 11, step * 2 + k)).collect();
        seen.truncate(10);
        let mut first: Vec<usize> = seen[..5].to_vec();
        first.sort_unstable();
        assert_eq!(first, vec![0, 1, 2, 3, 4]);
    }
    assert_eq!(batch_indices(4, 3, 1, 7), batch_indices(4, 3, 1, 7));
}

#[test]
fn zero_step_budget_leaves_model_unchanged() {
    let mut model = PdvaeModel::new(toy_model_config(), 1).unwrap();
    let before = model.params().clone();
    let records = fit(&mut model, &toy_data(2, 1), &toy_train(0)).unwrap();
    assert!(records.is_empty());
    assert!(model.params().bit_equal(&before));
}

#[test]
fn fit_is_deterministic_and_resumable() {
    let data = toy_data(3, 1);
    let run = |steps: usize| {
        let mut model = PdvaeModel::new(toy_model_config(), 2).unwrap();
        let r = fit(&mut model, &data, &toy_train(steps)).unwrap();
        (model, r)
    };
    let (m1, r1) = run(6);
    let (m2, r2) = run(6);
    assert_eq!(r1, r2);
    assert!(m1.params().bit_equal(m2.params()));
    for (i, r) in r1.iter().enumerate() {
        assert_eq!(r.step, i);
        assert!((r.total - (r.rec + 5e-4 * r.kl + 1e-4 * r.csc)).abs() < 1e-12);
    }

    // three steps, checkpoint, three more from the restored state
    let mut model = PdvaeModel::new(toy_model_config(), 2).unwrap();
    let mut opt = OptimizerState::for_store(model.params());
    let first = fit_from(&mut model, &data, &toy_train(3), &mut opt, |_| Ok(())).unwrap();
    let bytes = Checkpoint::capture(&model, LatentMode::Phase, Some(&opt)).to_bytes().unwrap();
    let (mut resumed, opt2) = Checkpoint::from_bytes(&bytes).unwrap().into_model().unwrap();
    let mut opt2 = opt2.unwrap();
    let second = fit_from(&mut resumed, &data, &toy_train(3), &mut opt2, |_| Ok(())).unwrap();
    let joined: Vec<TrainRecord> = first.into_iter().chain(second).collect();
    assert_eq!(joined, r1);
    assert!(resumed.params().bit_equal(m1.params()));
}

#[test]
fn fit_rejects_bad_inputs() {
    let mut model = PdvaeModel::new(toy_model_config(), 1).unwrap();
    assert!(fit(&mut model, &[], &toy_train(1)).is_err());
    let bad = TrainConfig { batch_groups: 0, ..toy_train(1) };
    assert!(fit(&mut model, &toy_data(1, 1), &bad).is_err());
    let bad = TrainConfig { weights: LossWeights { kl: -1.0, consistency: 0.0 }, ..toy_train(1) };
    assert!(fit(&mut model, &toy_data(1, 1), &bad).is_err());
}

#[test]
fn divergence_is_reported_with_the_record() {
    let mut model = PdvaeModel::new(toy_model_config(), 1).unwrap();
    let id = model.params().lookup("dec.curves_in.w").unwrap();
    model.params_mut().value_mut(id).data_mut()[0] = f64::NAN;
    let before = model.params().clone();
    match fit(&mut model, &toy_data(1, 1), &toy_train(2)) {
        Err(Error::Diverged { step, .. }) => assert_eq!(step, 0),
        other => panic!("expected divergence, got {other:?}"),
    }
    let after = model.params();
    let n = after.len();
    assert_eq!(n, before.len());
    assert!(after.ids().all(|i| i == id || after.value(i) == before.value(i)));
}

#[test]
fn short_training_reduces_reconstruction() {
    let data = toy_data(2, 8);
    let mut model = PdvaeModel::new(toy_model_config(), 9).unwrap();
    let r = fit(&mut model, &data, &TrainConfig { steps: 60, ..toy_train(0) }).unwrap();
    let head: f64 = r[..5].iter().map(|x| x.rec).sum::<f64>() / 5.0;
    let tail: f64 = r[r.len() - 5..].iter().map(|x| x.rec).sum::<f64>() / 5.0;
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let model = PdvaeModel::new(toy_model_config(), 12).unwrap();
    let ck = Checkpoint::capture(&model, LatentMode::Phase, None);
    let bytes = ck.to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    let (loaded, opt) = back.into_model().unwrap();
    assert!(opt.is_none());
    assert!(loaded.params().bit_equal(model.params()));

    let data = toy_data(1, 3);
    let fwd = |m: &PdvaeModel| loss_record(m, &data, LossWeights::default(), Ablation::default());
    let (a, b) = (fwd(&model), fwd(&loaded));
    assert_eq!(a.total.to_bits(), b.total.to_bits());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ck.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), ck);
}

#[test]
fn truncated_checkpoint_is_a_structured_error() {
    let model = PdvaeModel::new(toy_model_config(), 12).unwrap();
    let bytes = Checkpoint::capture(&model, LatentMode::Phase, None).to_bytes().unwrap();
    for cut in [0, 5, 20, bytes.len() / 2, bytes.len() - 1] {
        match Checkpoint::from_bytes(&bytes[..cut]) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("truncated") || msg.contains("magic"), "{msg}"),
            other => panic!("cut {cut}: {other:?}"),
        }
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(Checkpoint::from_bytes(&extra), Err(Error::Checkpoint(_))));
    let mut bad = bytes;
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checkpoint(_))));
}

#[test]
fn checkpoint_with_wrong_channel_count_names_the_tensor() {
    let model = PdvaeModel::new(toy_model_config(), 12).unwrap();
    let ck = Checkpoint::capture(&model, LatentMode::Phase, None);
    let mut other = PdvaeModel::new(ModelConfig { channels: 6, ..toy_model_config() }, 12).unwrap();
    let before = other.params().clone();
    match ck.clone().restore_into(&mut other) {
        Err(Error::ParamShape { name, expected, found }) => {
            assert!(name.starts_with("enc.to_latent"), "{name}");
            assert_ne!(expected, found);
        }
        other => panic!("expected ParamShape, got {other:?}"),
    }
    assert!(other.params().bit_equal(&before));

    let mut same_shapes = PdvaeModel::new(ModelConfig { omega: 20.0, ..toy_model_config() }, 12).unwrap();
    assert!(matches!(ck.restore_into(&mut same_shapes), Err(Error::Checkpoint(_))));
}
