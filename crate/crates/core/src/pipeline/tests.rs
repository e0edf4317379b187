use super::*;
use crate::data::{generate, SynthConfig};
use crate::eval::{read_embeddings, write_embeddings, EmbeddingRow};
use crate::norm::NormKind;

fn domains(n: usize, seed: u64) -> Vec<DomainSet> {
    generate(&SynthConfig {
        num_domains: n,
        train_identities: 6,
        test_identities: 3,
        images_per_identity: 4,
        image_size: (3, 16, 8),
        seed,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn config(norm: NormKind) -> TrainConfig {
    let mut model = ModelConfig::uniform(&[8, 12, 16], norm, 2);
    model.input_size = (16, 8);
    model.embedding_dim = 10;
    TrainConfig {
        epochs: 2,
        iters_per_domain: Some(2),
        batch: BatchSpec {
            identities: 3,
            images_per_identity: 2,
        },
        dbscan: DbscanConfig {
            min_points: 2,
            rho: Some(0.1),
            ..DbscanConfig::default()
        },
        model,
        seed: 7,
        ..TrainConfig::default()
    }
}

fn stats(m: &Backbone<f32>) -> Vec<Vec<(Vec<f32>, Vec<f32>, u64)>> {
    m.norm_states()
        .iter()
        .map(|s| s.domains().iter().map(|d| (d.running_mean.clone(), d.running_var.clone(), d.batch_count)).collect())
        .collect()
}

fn bits(m: &Backbone<f32>) -> Vec<u32> {
    m.params.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
}

#[test]
fn mode_names_round_trip() {
    for m in [RunMode::UnDg, RunMode::SupervisedDg, RunMode::UdaWoSl] {
        assert_eq!(m.to_string().parse::<RunMode>().unwrap(), m);
        assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{m}\""));
    }
    assert!(matches!("udg".parse::<RunMode>(), Err(Error::Config { .. })));
}

#[test]
fn config_json_names_unknown_fields() {
    let err = TrainConfig::from_json(r#"{"epochs": 3, "learning_rat": 0.1}"#).unwrap_err();
    assert!(err.to_string().contains("learning_rat"), "{err}");
    let c = TrainConfig::from_json(r#"{"epochs": 3}"#).unwrap();
    assert_eq!(c.epochs, 3);
    assert_eq!(c.learning_rate, 3.5e-4);
    let mut bad = config(NormKind::Bn);
    bad.epochs = 0;
    assert!(Trainer::new(bad, domains(2, 0)).is_err());
}

#[test]
fn default_iterations_cover_the_largest_split() {
    let mut c = config(NormKind::Bn);
    c.iters_per_domain = None;
    let t = Trainer::new(c, domains(2, 0)).unwrap();
    // 24 train images, batches of 6.
    assert_eq!(t.iters_per_domain(), 4);
}

#[test]
fn zero_learning_rate_epoch_keeps_parameters_bit_identical() {
    let mut c = config(NormKind::Dsan);
    c.learning_rate = 0.0;
    c.mode = RunMode::SupervisedDg;
    let mut t = Trainer::new(c, domains(2, 1)).unwrap();
    let (before, heads) = (bits(&t.model), t.heads.params.clone());
    let log = t.run_epoch().unwrap();
    assert_eq!(log.steps, 4);
    assert_eq!(bits(&t.model), before);
    assert_eq!(t.heads.params, heads);
}

#[test]
fn training_one_domain_leaves_the_other_domains_statistics_alone() {
    let mut t = Trainer::new(config(NormKind::Dsbn), domains(2, 2)).unwrap();
    let mut labels = t.supervised_labels().unwrap();
    t.relabel().unwrap();
    t.heads = ClassifierBank::new(10, &[6, 6], &mut rng::stream(0, &[tag::HEADS]));
    t.head_opt = Adam::new(t.config().adam(), &t.heads.params);
    labels[1].iter_mut().for_each(|l| *l = NOISE);
    let before = stats(&t.model);
    let out = t.train_epoch(&labels).unwrap();
    assert_eq!(out.skipped, vec![false, true]);
    assert_eq!(out.iterations, vec![2, 0]);
    let after = stats(&t.model);
    for (b, a) in before.iter().zip(&after) {
        assert_ne!(b[0], a[0]);
        assert_eq!(b[1], a[1]);
    }
}

#[test]
fn relabel_leaves_backbone_state_unchanged() {
    let mut t = Trainer::new(config(NormKind::Dsan), domains(2, 3)).unwrap();
    t.run_epoch().unwrap();
    let digest = t.model.state_digest();
    let model = t.model.clone();
    t.relabel().unwrap();
    t.extract_features(1).unwrap();
    assert_eq!(t.model.state_digest(), digest);
    assert_eq!(t.model, model);
}

#[test]
fn state_digest_sees_running_statistics() {
    let mut t = Trainer::new(config(NormKind::Bn), domains(2, 3)).unwrap();
    let digest = t.model.state_digest();
    t.warm_up_running_stats().unwrap();
    assert_ne!(t.model.state_digest(), digest);
}

#[test]
fn noise_samples_never_enter_a_batch() {
    let mut t = Trainer::new(config(NormKind::Dsan), domains(2, 4)).unwrap();
    let mut labels = t.supervised_labels().unwrap();
    // Every third sample becomes noise.
    for l in labels.iter_mut() {
        l.iter_mut().step_by(3).for_each(|v| *v = NOISE);
    }
    t.heads = ClassifierBank::new(10, &[6, 6], &mut rng::stream(0, &[tag::HEADS]));
    t.head_opt = Adam::new(t.config().adam(), &t.heads.params);
    let out = t.train_epoch(&labels).unwrap();
    assert_eq!(out.batches.len(), 4);
    for b in &out.batches {
        for (&s, &l) in b.samples.iter().zip(&b.labels) {
            assert_ne!(labels[b.domain][s], NOISE);
            assert_eq!(labels[b.domain][s] as usize, l);
        }
    }
}

#[test]
fn features_are_unit_rows_of_the_eval_embedding() {
    let t = Trainer::new(config(NormKind::Dsan), domains(2, 5)).unwrap();
    let f = t.extract_features(1).unwrap();
    let idx = t.sources()[1].indices(Split::Train);
    assert_eq!(f.shape().n, idx.len());
    let raw = t.model.embed(&t.sources()[1].images_at(&idx).unwrap(), 1).unwrap();
    assert_eq!(f, l2_normalize(&raw));
    for row in f.data().chunks(10) {
        let n: f32 = row.iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-5);
    }
}

#[test]
fn one_hot_identity_features_cluster_to_the_identities() {
    let truth: Vec<usize> = (0..24).map(|i| i / 4).collect();
    let f = Tensor::from_fn(crate::Shape::matrix(24, 6), |i| if i % 6 == truth[i / 6] { 1.0f32 } else { 0.0 });
    let cfg = DbscanConfig {
        epsilon: 0.5,
        min_points: 2,
        ..DbscanConfig::default()
    };
    let r = relabel(&[f], &[cfg], &[Some(truth)]).unwrap();
    assert_eq!(r.assignments[0].num_clusters, 6);
    assert_eq!(r.ami[0], Some(1.0));
    assert_eq!(r.fmi[0], Some(1.0));
}

#[test]
fn identical_features_form_one_cluster_and_a_unary_head() {
    let f = Tensor::from_fn(crate::Shape::matrix(10, 4), |i| (i % 4) as f32);
    let r = relabel(&[f], &[DbscanConfig::default()], &[None]).unwrap();
    assert_eq!(r.assignments[0].num_clusters, 1);
    assert_eq!(r.assignments[0].num_noise(), 0);
    assert_eq!(r.ami[0], None);
    let bank = ClassifierBank::<f32>::new(4, &[r.assignments[0].num_clusters], &mut rng::stream(0, &[tag::HEADS]));
    assert_eq!(bank.classes(), vec![1]);
}

#[test]
fn relabel_matches_head_arity_to_cluster_counts() {
    let mut t = Trainer::new(config(NormKind::Dsbn), domains(2, 6)).unwrap();
    t.warm_up_running_stats().unwrap();
    let r = t.relabel().unwrap();
    let counts: Vec<usize> = r.assignments.iter().map(|a| a.num_clusters).collect();
    assert_eq!(t.heads.classes(), counts);
}

#[test]
fn logged_ami_matches_recomputation_from_saved_embeddings() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(config(NormKind::Dsan), domains(2, 8)).unwrap();
    t.run_epoch().unwrap();
    let mut saved = Vec::new();
    for d in 0..2 {
        let f = t.extract_features(d).unwrap();
        let idx = t.sources()[d].indices(Split::Train);
        let path = dir.path().join(format!("d{d}.tsv"));
        let rows: Vec<EmbeddingRow> = idx
            .iter()
            .zip(f.data().chunks(10))
            .map(|(&i, v)| EmbeddingRow {
                sample_id: t.sources()[d].records[i].sample_id,
                domain_id: d,
                path: format!("domain_{d}"),
                values: v.iter().map(|&x| f64::from(x)).collect(),
            })
            .collect();
        write_embeddings(&rows, &path).unwrap();
        saved.push(path);
    }
    let log = t.run_epoch().unwrap();
    for (d, path) in saved.iter().enumerate() {
        let rows = read_embeddings(path).unwrap();
        let n = rows.len();
        let f = Tensor::from_vec(crate::Shape::matrix(n, 10), rows.iter().flat_map(|r| r.values.iter().map(|&v| v as f32)).collect()).unwrap();
        let a = dbscan(&f, &t.config().dbscan).unwrap();
        let truth = t.truth()[d].as_ref().unwrap();
        let ami = adjusted_mutual_info(&a.labels, truth).unwrap();
        assert_eq!(a.num_clusters, log.domains[d].num_clusters);
        assert!((ami - log.domains[d].ami.unwrap()).abs() < 1e-12, "domain {d}: {ami} vs {:?}", log.domains[d].ami);
    }
}

#[test]
fn supervised_mode_requires_identities() {
    let mut c = config(NormKind::Dsan);
    c.mode = RunMode::SupervisedDg;
    let sources: Vec<DomainSet> = domains(2, 0).into_iter().map(|d| d.without_train_labels()).collect();
    let err = Trainer::new(c, sources).unwrap_err();
    assert!(err.to_string().contains("identities required"), "{err}");
}

#[test]
fn supervised_loss_trends_down() {
    let mut c = config(NormKind::Bn);
    c.mode = RunMode::SupervisedDg;
    c.learning_rate = 1e-3;
    c.iters_per_domain = Some(8);
    let mut t = Trainer::new(c, domains(1, 9)).unwrap();
    let losses: Vec<f64> = (0..6)
        .map(|_| {
            let l = t.run_epoch().unwrap();
            l.cls_loss + l.tri_loss
        })
        .collect();
    let violations = losses.windows(2).filter(|w| w[1] >= w[0]).count();
    assert!(violations <= 1, "{losses:?}");
    assert!(losses[5] < losses[0], "{losses:?}");
}

#[test]
fn clustering_with_true_labels_matches_supervised_training() {
    let mut sup_cfg = config(NormKind::Dsan);
    sup_cfg.mode = RunMode::SupervisedDg;
    let mut sup = Trainer::new(sup_cfg, domains(2, 10)).unwrap();
    let mut un = Trainer::new(config(NormKind::Dsan), domains(2, 10)).unwrap();
    un.heads = sup.heads.clone();
    un.head_opt = sup.head_opt.clone();
    sup.warm_up_running_stats().unwrap();
    un.warm_up_running_stats().unwrap();
    let labels = sup.supervised_labels().unwrap();
    let a = sup.train_epoch(&labels).unwrap();
    let b = un.train_epoch(&labels).unwrap();
    assert_eq!(a, b);
    assert_eq!(sup.model, un.model);
}

#[test]
fn non_finite_loss_aborts_with_a_diagnostic() {
    let mut c = config(NormKind::Bn);
    c.mode = RunMode::SupervisedDg;
    c.warmup_running_stats = false;
    let mut t = Trainer::new(c, domains(2, 11)).unwrap();
    let id = t.model.params.ids().next().unwrap();
    t.model.params.get_mut(id).data_mut()[0] = f32::NAN;
    let err = t.run_epoch().unwrap_err();
    assert!(matches!(err, Error::Diverged(_)), "{err}");
    assert!(err.to_string().contains("samples"));
    let diag = t.diagnostic.as_ref().unwrap();
    assert_eq!(diag["sample_ids"].as_array().unwrap().len(), 6);
    assert_eq!(diag["parameters"][0]["finite"], false);
}

#[test]
fn run_writes_log_checkpoint_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let data = domains(3, 12);
    let summary = run(&config(NormKind::Dsan), data[..2].to_vec(), &data[2..], dir.path(), false).unwrap();
    assert_eq!(summary.epochs, 2);
    assert_eq!(summary.resumed_from, None);
    assert_eq!(summary.target_reports.len(), 1);
    assert!(summary.source_reports.is_empty());
    let logs = read_epoch_log(&dir.path().join(EPOCH_LOG_FILE)).unwrap();
    assert_eq!(logs.iter().map(|l| l.epoch).collect::<Vec<_>>(), vec![0, 1]);
    assert_eq!(summary.final_epoch.as_ref(), logs.last());
    let ckpt = load_checkpoint::<f32>(dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ckpt.epoch, 2);
    let back: RunSummary = serde_json::from_str(&std::fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap()).unwrap();
    assert_eq!(back.epochs, 2);
}

#[test]
fn source_evaluated_mode_reports_the_sources() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(NormKind::Dsan);
    c.mode = RunMode::UdaWoSl;
    c.epochs = 1;
    assert!(c.augment_config().random_erasing);
    let summary = run(&c, domains(2, 13), &[], dir.path(), false).unwrap();
    assert_eq!(summary.source_reports.len(), 2);
    assert!(summary.source_reports[0].clustering.is_some());
    assert!(summary.target_reports.is_empty());
}

fn without_times(mut logs: Vec<EpochLog>) -> Vec<EpochLog> {
    logs.iter_mut().for_each(|l| l.wall_time_s = 0.0);
    logs
}

#[test]
fn resumed_run_reproduces_the_uninterrupted_run() {
    let data = domains(3, 14);
    let mut c = config(NormKind::Dsan);
    c.epochs = 3;
    let full = tempfile::tempdir().unwrap();
    let a = run(&c, data[..2].to_vec(), &data[2..], full.path(), false).unwrap();

    let part = tempfile::tempdir().unwrap();
    let mut short = c.clone();
    short.epochs = 1;
    run(&short, data[..2].to_vec(), &data[2..], part.path(), false).unwrap();
    let b = run(&c, data[..2].to_vec(), &data[2..], part.path(), true).unwrap();
    assert_eq!(b.resumed_from, Some(1));

    let ca = load_checkpoint::<f32>(full.path().join(CHECKPOINT_FILE)).unwrap();
    let cb = load_checkpoint::<f32>(part.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ca.backbone.state_digest(), cb.backbone.state_digest());
    assert_eq!(ca.backbone, cb.backbone);
    assert_eq!(ca.heads, cb.heads);
    assert_eq!(ca.backbone_opt, cb.backbone_opt);
    let la = without_times(read_epoch_log(&full.path().join(EPOCH_LOG_FILE)).unwrap());
    let lb = without_times(read_epoch_log(&part.path().join(EPOCH_LOG_FILE)).unwrap());
    assert_eq!(la, lb);
    assert_eq!(a.target_reports, b.target_reports);
}

#[test]
fn resume_rejects_a_different_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = config(NormKind::Bn);
    c.epochs = 1;
    run(&c, domains(2, 15), &[], dir.path(), false).unwrap();
    c.learning_rate = 1e-2;
    let err = run(&c, domains(2, 15), &[], dir.path(), true).unwrap_err();
    assert!(matches!(err, Error::Config { .. }), "{err}");
}
