use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use deepmcp::config::{RunConfig, TrainConfig};
use deepmcp::features::{hash_feature, parse_log_line, FieldSchema, Instance};
use deepmcp::model::{FmModel, InitScheme};
use deepmcp::tensor::{
    adagrad_update, dropout, logistic_loss, sigmoid, tanh_act, DenseMatrix, Mode, ParamBlock, ADAGRAD_EPS,
};
use deepmcp::training::{stream_rng, Checkpoint};

fn schema() -> FieldSchema {
    FieldSchema::parse("age,user,univalent\nq,query,multivalent\nad,ad,univalent\ntitle,ad,multivalent\nh,other,univalent\n")
        .unwrap()
}

proptest! {
    #[test]
    fn hash_stays_in_range(field in "[a-z_]{1,8}", value in ".{0,16}", n in 1usize..1_000_000) {
        let h = hash_feature(&field, &value, n);
        prop_assert!(h < n);
        prop_assert_eq!(h, hash_feature(&field, &value, n));
    }

    #[test]
    fn parsed_indices_stay_in_range(
        label in 0u8..2,
        ts in any::<i64>(),
        words in proptest::collection::vec("[a-z]{1,6}", 0..5),
        n in 1usize..5000,
    ) {
        let line = format!("{label}\tu1\t{ts}\t30\t{}\tad7\t{}\t13", words.join("|"), words.join(" "));
        let inst: Instance = parse_log_line(&line, 1, &schema(), n).unwrap();
        prop_assert_eq!(inst.label, label);
        prop_assert_eq!(inst.timestamp, ts);
        prop_assert!(inst.active_indices().all(|i| i < n));
        prop_assert_eq!(inst.query_indices[0].len(), words.len());
        prop_assert_eq!(inst.ad_indices[1].len(), words.len());
    }

    #[test]
    fn activations_and_loss_are_total(x in -1e6f64..1e6, p in 0.0f64..=1.0, y in 0u8..2) {
        let s = sigmoid(x);
        prop_assert!(s.is_finite() && (0.0..=1.0).contains(&s));
        prop_assert!(tanh_act(x).abs() <= 1.0);
        let l = logistic_loss(p, f64::from(y));
        prop_assert!(l.is_finite() && l >= 0.0);
    }

    #[test]
    fn adagrad_accumulator_grows_and_values_stay_finite(
        grads in proptest::collection::vec(proptest::collection::vec(-1e3f32..1e3, 6), 1..10),
        lr in 1e-4f64..1.0,
    ) {
        let mut p = ParamBlock::<f32>::zeros(2, 3);
        let mut prev = vec![0.0f32; 6];
        for g in grads {
            p.grad.values_mut().copy_from_slice(&g);
            adagrad_update(&mut p, lr, ADAGRAD_EPS).unwrap();
            let acc = p.accum.values().to_vec();
            prop_assert!(acc.iter().zip(&prev).all(|(a, b)| a >= b && *a >= 0.0));
            prop_assert!(p.value.is_finite());
            prop_assert!(p.grad.values().iter().all(|&g| g == 0.0));
            prev = acc;
        }
    }

    #[test]
    fn dropout_keeps_or_scales(values in proptest::collection::vec(-10.0f64..10.0, 1..40), ratio in 0.0f64..0.95, seed in any::<u64>()) {
        let (out, _) = dropout(&values, ratio, &mut ChaCha8Rng::seed_from_u64(seed), Mode::Train).unwrap();
        let scale = 1.0 / (1.0 - ratio);
        for (o, v) in out.iter().zip(&values) {
            prop_assert!(*o == 0.0 || (o - v * scale).abs() <= 1e-12 * v.abs().max(1.0));
        }
        let (eval, _) = dropout(&values, ratio, &mut ChaCha8Rng::seed_from_u64(seed), Mode::Eval).unwrap();
        prop_assert_eq!(eval, values);
    }

    #[test]
    fn config_text_round_trips(
        alpha in 0.0f64..10.0,
        lr in 1e-5f64..1.0,
        dims in proptest::collection::vec(1usize..600, 0..4),
        seed in any::<u64>(),
        glorot in any::<bool>(),
        n_users in 1usize..10_000,
    ) {
        let mut c = RunConfig::default();
        c.train.alpha = alpha;
        c.train.learning_rate = lr;
        c.train.layer_dims = dims;
        c.train.seed = seed;
        c.train.init = if glorot { InitScheme::Glorot } else { InitScheme::Uniform };
        c.world.n_users = n_users;
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        prop_assert_eq!(back, c);
    }

    #[test]
    fn checkpoint_bytes_round_trip(
        k in 1usize..5,
        dims in proptest::collection::vec(1usize..6, 0..3),
        m in 1usize..5,
        seed in any::<u64>(),
        strip in any::<bool>(),
    ) {
        let config = TrainConfig {
            hash_space: 50,
            embedding_dim: k,
            layer_dims: dims,
            repr_dim: m,
            seed,
            ..TrainConfig::default()
        };
        let model = deepmcp::model::DeepMcp::init(schema(), config.architecture(), &mut stream_rng(seed, 0));
        let mut c = Checkpoint { config, model, best_val_auc: 0.5, batch: seed % 1000 };
        if strip {
            c = c.stripped();
        }
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back.model.aux.is_none(), strip);
    }

    #[test]
    fn fm_fast_form_matches_pairs(idx in proptest::collection::vec(0usize..30, 1..12), seed in any::<u64>()) {
        let fm = FmModel::<f64>::init(30, 4, &mut ChaCha8Rng::seed_from_u64(seed), 1.0);
        let inst = Instance {
            label: 1,
            user_id: "u".into(),
            timestamp: 0,
            user_indices: vec![idx[..1].to_vec()],
            query_indices: vec![idx[1..].to_vec()],
            ad_indices: Vec::new(),
            other_indices: Vec::new(),
        };
        let mut naive = 0.0;
        for p in 0..idx.len() {
            for q in p + 1..idx.len() {
                naive += fm.factors.row(idx[p]).iter().zip(fm.factors.row(idx[q])).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        prop_assert!((fm.interaction_term(&inst).unwrap() - naive).abs() < 1e-9);
    }
}

#[test]
fn dense_matrix_rejects_bad_length() {
    assert!(DenseMatrix::<f32>::from_vec(2, 3, vec![0.0; 5]).is_err());
}
