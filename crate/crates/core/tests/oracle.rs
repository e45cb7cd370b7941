//! Graph forward pass against the scalar-loop reference, module by module.

mod common;

use dual_mfa::data::{random_dataset, VqaInstance};
use dual_mfa::model::{forward, loss, FeatureBatch};
use dual_mfa::question::{encode, gru_step, GruParameters};
use dual_mfa::trainer::Dropout;
use dual_mfa::{Branches, DualMfaParameters, Graph, ModelConfig, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-12;

fn check_config(cfg: &ModelConfig, seed: u64) -> f64 {
    let params = DualMfaParameters::init(cfg, seed);
    let data = random_dataset(cfg, 5, seed + 100).unwrap();
    let refs: Vec<&VqaInstance> = data.instances.iter().collect();
    let batch = FeatureBatch::new(&refs, cfg).unwrap();
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let pass = forward(&mut g, &vars, cfg, &batch, &mut Dropout::disabled()).unwrap();

    let k = cfg.hidden_dim;
    let mut worst = 0.0f64;
    let probs = pass.probabilities(&g);
    let attention = pass.attention(&g);
    for (s, inst) in data.instances.iter().enumerate() {
        let o = common::forward(&params, cfg, inst);
        let q = &g.value(pass.question).data()[s * k..(s + 1) * k];
        worst = worst.max(common::max_abs_diff(q, &o.question));

        for (out, oracle, att) in [
            (pass.region, &o.region, attention[s].a1.as_ref()),
            (pass.detection, &o.detection, attention[s].a2.as_ref()),
        ] {
            assert_eq!(out.is_some(), oracle.is_some());
            let (Some(out), Some(oracle)) = (out, oracle) else {
                continue;
            };
            let locs = oracle.local.len();
            let dc = cfg.common_dim;
            let block = locs * dc;
            let joint = &g.value(out.fusion.joint).data()[s * block..(s + 1) * block];
            let local = &g.value(out.fusion.local).data()[s * block..(s + 1) * block];
            worst = worst.max(common::max_abs_diff(joint, &oracle.joint.concat()));
            worst = worst.max(common::max_abs_diff(local, &oracle.local.concat()));
            let att = att.unwrap();
            worst = worst.max(common::max_abs_diff(att.data(), &oracle.weights.concat()));
            let width = cfg.attended_dim();
            let pooled = &g.value(out.attended.pooled).data()[s * width..(s + 1) * width];
            worst = worst.max(common::max_abs_diff(pooled, &oracle.pooled));
        }

        let cw = cfg.combine_dim();
        let combined = &g.value(pass.combined).data()[s * cw..(s + 1) * cw];
        worst = worst.max(common::max_abs_diff(combined, &o.combined));
        let n = cfg.n_answers;
        let logits = &g.value(pass.logits).data()[s * n..(s + 1) * n];
        worst = worst.max(common::max_abs_diff(logits, &o.logits));
        worst = worst.max(common::max_abs_diff(&probs[s], &o.probs));
    }

    let targets = data.targets().unwrap();
    let l = loss(&params, cfg, &batch, &targets).unwrap();
    worst.max((l - common::loss(&params, cfg, &data.instances, &targets)).abs())
}

#[test]
fn every_module_matches_scalar_reference_for_all_ablations() {
    for (i, cfg) in common::ablation_grid(&ModelConfig::tiny())
        .iter()
        .enumerate()
    {
        let err = check_config(cfg, 40 + i as u64);
        assert!(
            err <= TOL,
            "{:?}/{:?}/{:?}: {err:e}",
            cfg.fusion,
            cfg.normalization,
            cfg.combine
        );
    }
}

#[test]
fn single_branch_models_match_scalar_reference() {
    for branches in [Branches::RegionOnly, Branches::DetectionOnly] {
        let cfg = ModelConfig {
            branches,
            ..ModelConfig::tiny()
        };
        let err = check_config(&cfg, 9);
        assert!(err <= TOL, "{branches:?}: {err:e}");
    }
}

#[test]
fn desk_dimensions_match_scalar_reference() {
    let err = check_config(&ModelConfig::desk(), 3);
    assert!(err <= TOL, "{err:e}");
}

#[test]
fn gru_step_matches_scalar_reference_at_small_dims() {
    let cfg = ModelConfig {
        embed_dim: 3,
        hidden_dim: 4,
        ..ModelConfig::tiny()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = GruParameters::init(&cfg, &mut rng);
    let x = dual_mfa::uniform_init(&[3], 1, &mut rng);
    let h = dual_mfa::uniform_init(&[4], 1, &mut rng);
    let mut g = Graph::new();
    let vars = p.bind(&mut g);
    let xv = g.constant(x.clone());
    let hv = g.constant(h.clone());
    let out = gru_step(&mut g, &vars, xv, hv).unwrap();
    let want = common::gru_step(&p, x.data(), h.data());
    assert!(common::max_abs_diff(g.value(out).data(), &want) <= TOL);
}

#[test]
fn three_step_encoding_chains_reference_steps() {
    let cfg = ModelConfig {
        question_len: 3,
        ..ModelConfig::tiny()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = GruParameters::init(&cfg, &mut rng);
    let seq = dual_mfa::question::TokenSequence::new(&[4, 1, 9], 3, cfg.vocab_size).unwrap();
    let mut g = Graph::new();
    let vars = p.bind(&mut g);
    let h = encode(&mut g, &vars, std::slice::from_ref(&seq)).unwrap();

    let mut want = vec![0.0; cfg.hidden_dim];
    for id in [4, 1, 9] {
        want = common::gru_step(&p, &common::embedding(&p, id), &want);
    }
    assert!(common::max_abs_diff(g.value(h).data(), &want) <= TOL);
}

#[test]
fn embedding_gather_equals_one_hot_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = dual_mfa::uniform_init(&[5, 7], 1, &mut rng);
    let ids = [3, 0, 6, 3];
    let mut g = Graph::new();
    let wv = g.constant(w.clone());
    let rows = g.gather_columns(wv, &ids).unwrap();
    for (r, &id) in ids.iter().enumerate() {
        let one_hot: Vec<f64> = (0..7).map(|j| if j == id { 1.0 } else { 0.0 }).collect();
        let want = common::matvec(&w, &one_hot);
        assert_eq!(&g.value(rows).data()[r * 5..(r + 1) * 5], want.as_slice());
    }
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = dual_mfa::uniform_init(&[3, 4], 1, &mut rng);
    let b = dual_mfa::uniform_init(&[4, 2], 1, &mut rng);
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(av, bv).unwrap();
    for i in 0..3 {
        for j in 0..2 {
            let mut acc = 0.0;
            for k in 0..4 {
                acc += a.at(&[i, k]) * b.at(&[k, j]);
            }
            assert!((g.value(c).at(&[i, j]) - acc).abs() <= TOL);
        }
    }
}

#[test]
fn elementwise_ops_match_direct_formulas() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::from_vec(vec![0.3]));
    let t = g.tanh(x);
    let e = (0.6f64).exp();
    assert!((g.value(t).item() - (e - 1.0) / (e + 1.0)).abs() <= TOL);

    let x = g.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
    let s = g.softmax_axis(x, 0).unwrap();
    let total: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    for (i, v) in g.value(s).data().iter().enumerate() {
        assert!((v - ((i + 1) as f64).exp() / total).abs() <= TOL);
    }

    let m = g.constant(Tensor::new(&[2, 3], vec![1.0, -2.0, 0.5, 4.0, 0.0, 7.0]).unwrap());
    let mean = g.mean_axis(m, 1).unwrap();
    assert_eq!(
        g.value(mean).data(),
        &[(1.0 - 2.0 + 0.5) / 3.0, (4.0 + 0.0 + 7.0) / 3.0]
    );
}
