use super::*;
use crate::corpus::{make_split, SplitMode, SplitSpec};
use crate::inference::Route;
use crate::synth::{generate, SynthConfig};
use crate::training::model::SimilarityChoice;

fn small_config(method: Method, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(method, seed);
    cfg.hidden_dim = 8;
    cfg.attention_heads = 2;
    cfg.attention_dim = 4;
    cfg.kernel_widths = vec![1, 2];
    cfg.kernel_channels = 4;
    cfg.capsule_dim = 4;
    cfg.epochs = 2;
    cfg.batch_size = 8;
    if method == Method::CompatDnn || method == Method::CompatCdssm {
        cfg.extractor = method.default_extractor();
    } else if method == Method::Linear {
        cfg.extractor = crate::extractors::ExtractorKind::MeanPoolTanh;
    }
    cfg
}

fn synth_split(cfg: &SynthConfig) -> (crate::corpus::Split, LabelSet, EmbeddingTable) {
    let data = generate(cfg).unwrap();
    let spec = SplitSpec::new(SplitMode::Gzsid, 0.7, 5).unwrap();
    let split = make_split(&data.corpus, &data.labels, &spec).unwrap();
    (split, data.labels, data.table)
}

#[test]
fn one_epoch_produces_representations_and_matrices() {
    let (split, labels, table) = synth_split(&SynthConfig {
        utterances_per_class: 4,
        ..SynthConfig::default()
    });
    let mut cfg = small_config(Method::Linear, 1);
    cfg.epochs = 1;
    let model = train(&split, &labels, &table, &cfg).unwrap();
    let k = labels.num_total();
    assert_eq!(model.reps.vectors.len(), k);
    assert_eq!(model.l_gzsl.shape(), &[k, k]);
    assert_eq!(model.l_zsl.shape(), &[k, labels.num_unseen()]);
    assert_eq!(model.loss_trace.len(), 1);
}

#[test]
fn same_seed_trains_bit_identical_models() {
    let (split, labels, table) = synth_split(&SynthConfig {
        utterances_per_class: 6,
        ..SynthConfig::default()
    });
    let cfg = small_config(Method::Linear, 9);
    let a = train(&split, &labels, &table, &cfg).unwrap();
    let b = train(&split, &labels, &table, &cfg).unwrap();
    for ((_, _, ta), (_, _, tb)) in a.core.store.iter().zip(b.core.store.iter()) {
        assert_eq!(ta.data(), tb.data());
    }
    assert_eq!(a.l_gzsl.data(), b.l_gzsl.data());
    assert_eq!(a.l_zsl.data(), b.l_zsl.data());
    assert_eq!(a.loss_trace, b.loss_trace);
}

#[test]
fn separable_corpus_reaches_full_training_accuracy() {
    let synth = SynthConfig {
        seen_classes: 2,
        unseen_classes: 1,
        dim: 4,
        tokens_per_class: 6,
        utterances_per_class: 20,
        token_noise: 0.03,
        ..SynthConfig::default()
    };
    let (split, labels, table) = synth_split(&synth);
    let mut cfg = small_config(Method::Linear, 3);
    cfg.epochs = 30;
    let model = train(&split, &labels, &table, &cfg).unwrap();

    let augmented = augment_label_pseudo_utterances(split.train.clone(), &labels).unwrap();
    let mut correct = 0;
    for u in &augmented {
        let gold = labels.index_of(&u.label).unwrap();
        let p = model
            .predict(&u.tokens, SplitMode::Gzsid, SimilarityChoice::Identity)
            .unwrap();
        if p.label_index == gold {
            correct += 1;
        }
    }
    assert_eq!(correct, augmented.len(), "training accuracy below 100%");
    assert!(
        model.loss_trace.last().unwrap() <= model.loss_trace.first().unwrap(),
        "loss did not decrease: {:?}",
        model.loss_trace
    );
}

#[test]
fn disabling_augmentation_freezes_unseen_parameters() {
    let (split, labels, table) = synth_split(&SynthConfig {
        utterances_per_class: 8,
        ..SynthConfig::default()
    });
    let mut cfg = small_config(Method::Linear, 4);
    cfg.augment = false;
    cfg.loss.alpha = 0.0;
    cfg.similarity_source = SimilaritySource::Embedding;
    cfg.epochs = 3;
    let model = train(&split, &labels, &table, &cfg).unwrap();

    // Fresh build reproduces the initialization exactly.
    let all: Vec<&Utterance> = split.train.iter().chain(split.test.iter()).collect();
    let restricted = restrict_table(&table, &all, &labels).unwrap();
    let init = ModelCore::build(&cfg, &labels, restricted).unwrap();

    let (i, k) = (labels.num_seen(), labels.num_total());
    let trained_w = model.core.store.get(crate::params::ParamId(2));
    let init_w = init.store.get(crate::params::ParamId(2));
    assert_eq!(model.core.store.name(crate::params::ParamId(2)), "linear.weight");
    let mut seen_moved = false;
    for row in 0..cfg.hidden_dim {
        for col in 0..k {
            if col >= i {
                assert_eq!(
                    trained_w.at(row, col),
                    init_w.at(row, col),
                    "unseen column {col} moved"
                );
            } else if trained_w.at(row, col) != init_w.at(row, col) {
                seen_moved = true;
            }
        }
    }
    assert!(seen_moved, "seen columns never updated");
    assert_eq!(model.active_classes, i);
}

#[test]
fn divergent_learning_rate_reports_epoch_and_batch() {
    let (split, labels, table) = synth_split(&SynthConfig {
        utterances_per_class: 4,
        ..SynthConfig::default()
    });
    let mut cfg = small_config(Method::Linear, 4);
    cfg.learning_rate = f64::MAX;
    cfg.epochs = 3;
    let err = train(&split, &labels, &table, &cfg).unwrap_err().to_string();
    assert!(err.contains("diverged") && err.contains("epoch"), "{err}");
}

#[test]
fn artifact_round_trips_bit_exactly() {
    let (split, labels, table) = synth_split(&SynthConfig {
        utterances_per_class: 5,
        ..SynthConfig::default()
    });
    let cfg = small_config(Method::CompatDnn, 11);
    let model = train(&split, &labels, &table, &cfg).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let p1 = dir.path().join("model.bin");
    let p2 = dir.path().join("model2.bin");
    model.save(&p1).unwrap();
    let loaded = TrainedModel::load(&p1).unwrap();
    loaded.save(&p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

    // Predictions survive the round trip bit-exactly.
    let u = &split.test[0];
    let a = model
        .predict(&u.tokens, SplitMode::Gzsid, SimilarityChoice::Model)
        .unwrap();
    let b = loaded
        .predict(&u.tokens, SplitMode::Gzsid, SimilarityChoice::Model)
        .unwrap();
    assert_eq!(a.label_index, b.label_index);
    assert_eq!(a.scores, b.scores);
}

#[test]
fn all_method_families_train_and_predict() {
    let (split, labels, table) = synth_split(&SynthConfig {
        utterances_per_class: 4,
        min_len: 3,
        max_len: 5,
        ..SynthConfig::default()
    });
    for method in [
        Method::Linear,
        Method::Capsule,
        Method::CompatDnn,
        Method::CompatCdssm,
    ] {
        let mut cfg = small_config(method, 13);
        cfg.epochs = 1;
        let model = train(&split, &labels, &table, &cfg).unwrap();
        let u = &split.test[0];
        let z = model
            .predict(&u.tokens, SplitMode::Zsid, SimilarityChoice::Model)
            .unwrap();
        assert!(z.label_index >= labels.num_seen(), "{method}: zsid range");
        let gz = model
            .predict(&u.tokens, SplitMode::Gzsid, SimilarityChoice::Model)
            .unwrap();
        assert!(gz.label_index < labels.num_total(), "{method}: gzsid range");
    }
}

#[test]
fn two_stage_routes_unseen_clusters_to_stage_two() {
    let synth = SynthConfig {
        seen_classes: 3,
        unseen_classes: 2,
        dim: 8,
        tokens_per_class: 8,
        utterances_per_class: 30,
        token_noise: 0.05,
        ..SynthConfig::default()
    };
    let (split, labels, table) = synth_split(&synth);
    let mut cfg = small_config(Method::Linear, 6);
    cfg.epochs = 10;
    cfg.lof_k = 10;
    let model = train(&split, &labels, &table, &cfg).unwrap();
    let stage1 = Stage1Model::train(&split, &labels, &table, &cfg).unwrap();

    let mut unseen_total = 0;
    let mut unseen_routed = 0;
    for u in &split.test {
        let gold = labels.index_of(&u.label).unwrap();
        let p = model
            .predict_two_stage(&stage1, &u.tokens, SimilarityChoice::Model)
            .unwrap();
        if !labels.is_seen_index(gold) {
            unseen_total += 1;
            if p.route == Route::TwoStageUnseen {
                unseen_routed += 1;
                assert!(p.label_index >= labels.num_seen());
            }
        } else if p.route == Route::TwoStageSeen {
            assert!(p.label_index < labels.num_seen());
        }
    }
    let recall = unseen_routed as f64 / unseen_total as f64;
    assert!(recall >= 0.9, "routing recall {recall}");
}

#[test]
fn ablation_flags_rewrite_the_config() {
    let cfg = small_config(Method::Linear, 1);
    let plan = ablation_variant(&cfg, &[AblationFlag::NoMt]).unwrap();
    assert_eq!(plan.config.loss.alpha, 0.0);
    assert_eq!(plan.config.loss.lambda_prime, 0.0);
    assert!(!plan.identity_similarity);

    let plan = ablation_variant(&cfg, &[AblationFlag::Es]).unwrap();
    assert_eq!(plan.config.similarity_source, SimilaritySource::Embedding);

    let plan = ablation_variant(&cfg, &[AblationFlag::NoSs]).unwrap();
    assert!(plan.identity_similarity);

    assert!(ablation_variant(&cfg, &[AblationFlag::NoSs, AblationFlag::Es]).is_err());
    let compat = small_config(Method::CompatDnn, 1);
    assert!(ablation_variant(&compat, &[AblationFlag::Es]).is_err());
}

#[test]
fn embedding_similarity_ignores_training() {
    // Two trainings with different seeds produce the same L when the
    // similarity source is the embedding table.
    let (split, labels, table) = synth_split(&SynthConfig {
        utterances_per_class: 4,
        ..SynthConfig::default()
    });
    let mut cfg_a = small_config(Method::Linear, 21);
    cfg_a.similarity_source = SimilaritySource::Embedding;
    cfg_a.epochs = 1;
    let mut cfg_b = cfg_a.clone();
    cfg_b.seed = 22;
    let a = train(&split, &labels, &table, &cfg_a).unwrap();
    let b = train(&split, &labels, &table, &cfg_b).unwrap();
    assert_eq!(a.l_gzsl.data(), b.l_gzsl.data());
    assert_eq!(a.l_zsl.data(), b.l_zsl.data());
}

#[test]
fn end_to_end_gradients_for_every_family() {
    use crate::tensor::gradcheck;
    let synth = SynthConfig {
        seen_classes: 2,
        unseen_classes: 1,
        dim: 3,
        tokens_per_class: 3,
        utterances_per_class: 3,
        min_len: 2,
        max_len: 3,
        ..SynthConfig::default()
    };
    let data = generate(&synth).unwrap();
    let labels = data.labels.clone();
    for method in [
        Method::Linear,
        Method::Capsule,
        Method::CompatDnn,
        Method::CompatCdssm,
    ] {
        let mut cfg = small_config(method, 2);
        cfg.hidden_dim = 4;
        cfg.attention_heads = 2;
        cfg.attention_dim = 3;
        cfg.kernel_widths = vec![1, 2];
        cfg.kernel_channels = 2;
        cfg.capsule_dim = 3;
        let utterances: Vec<&Utterance> = data.corpus.iter().take(3).collect();
        let restricted = restrict_table(&data.table, &utterances, &labels).unwrap();
        let core = ModelCore::build(&cfg, &labels, restricted).unwrap();
        let batch: Vec<(&[String], usize)> = utterances
            .iter()
            .map(|u| (u.tokens.as_slice(), labels.index_of(&u.label).unwrap()))
            .collect();
        let params: Vec<Tensor> = core.store.iter().map(|(_, _, t)| t.clone()).collect();
        let err = gradcheck::check(&params, |g, nodes| {
            let mut probe = ParamStore::new();
            let mut bindings = Bindings::new();
            for (i, node) in nodes.iter().enumerate() {
                let id = probe.alloc(format!("p{i}"), g.value(*node).clone());
                bindings.preset(id, *node);
            }
            let ctx = LossContext::new(&core, &cfg, &labels);
            ctx.batch_loss(g, &mut bindings, &probe, &batch)
        });
        assert!(err < 1e-4, "{method}: end-to-end max rel err {err}");
    }
}
