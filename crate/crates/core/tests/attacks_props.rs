use ldpfl_core::aggregation::{geometric_median, multikrum, AggregationConfig, GEOMEDIAN_MAX_ITER, GEOMEDIAN_TOL};
use ldpfl_core::attacks::{
    adapa_generate, adapa_init, fit_on_def, ldpfl_dimension_merge, llra_update, restricted_median, rpa_update,
    survivor_range, tmma_update, AttackContext, AttackKind, AttackMode, AttackPlan, AttackerData, EavesdropView,
};
use ldpfl_core::data::{synth_blobs, Dataset};
use ldpfl_core::ldp::{is_two_point, two_point_values, LayerRanges};
use ldpfl_core::models::{Model, ModelSpec};
use ldpfl_core::{Error, ParamVector, Protocol, ProtocolConfig, RoundOptions, TransformLayer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Fixture {
    model: Model,
    global: ParamVector,
    data: Dataset,
    ranges: LayerRanges,
}

fn fixture() -> Fixture {
    let data = synth_blobs(3, 4, 15, 0.8, 12).unwrap();
    let model = Model::new(ModelSpec::logistic(4, 3)).unwrap();
    let global = model.init_params(5);
    let ranges = LayerRanges::from_global(&global);
    Fixture {
        model,
        global,
        data,
        ranges,
    }
}

fn ctx<'a>(f: &'a Fixture, protocol: &'a ProtocolConfig, agg: &'a AggregationConfig) -> AttackContext<'a> {
    AttackContext {
        model: &f.model,
        global: &f.global,
        protocol,
        aggregation: agg,
        ranges: &f.ranges,
    }
}

fn noiseless(protocol: Protocol) -> ProtocolConfig {
    ProtocolConfig {
        sigma: 0.0,
        sample_prob: 1.0,
        clip_c: 1e12,
        ..ProtocolConfig::new(protocol, 0.2)
    }
}

fn attacker(data: &Dataset) -> AttackerData<'_> {
    AttackerData { data, transform: None }
}

fn benign_cloud(f: &Fixture, rng: &mut ChaCha8Rng, m: usize, spread: f64) -> Vec<ParamVector> {
    (0..m)
        .map(|_| {
            f.global
                .with_values(f.global.values().iter().map(|w| w + spread * rng.gen_range(-1.0..1.0)).collect())
                .unwrap()
        })
        .collect()
}

fn global_view(uploads: Vec<ParamVector>, n_total: usize, n: usize) -> EavesdropView {
    EavesdropView {
        benign_uploads: Some(uploads),
        n_total: Some(n_total),
        n_malicious: Some(n),
    }
}

#[test]
fn rpa_norm_and_codomain() {
    let f = fixture();
    let agg = AggregationConfig::Fedavg;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = ProtocolConfig::new(Protocol::Ldpsgd, 0.2);
    let mut plan = AttackPlan::new(AttackKind::Rpa).with_ate(3);
    plan.t_scale = 0.0;
    assert_eq!(rpa_update(&ctx(&f, &cfg, &agg), &plan, &mut rng).unwrap(), f.global);
    plan.t_scale = 50.0;
    let up = rpa_update(&ctx(&f, &cfg, &agg), &plan, &mut rng).unwrap();
    let offset = f.global.sub(&up).unwrap().l2_norm() / cfg.eta;
    let target = 50.0 * cfg.clip_c * 3.0;
    assert!((offset - target).abs() <= 1e-9 * target);

    let cfg = ProtocolConfig::new(Protocol::Ldpfl, 0.2);
    let up = rpa_update(&ctx(&f, &cfg, &agg), &plan, &mut rng).unwrap();
    assert!(is_two_point(&up, &f.ranges, cfg.epsilon));
}

#[test]
fn llra_output_loss_grows_with_ate() {
    let f = fixture();
    let agg = AggregationConfig::Fedavg;
    let cfg = ProtocolConfig::new(Protocol::Ldpsgd, 0.2);
    // fit first
    let mut fitted = f.global.clone();
    for _ in 0..200 {
        let g = f.model.grad(&fitted, &f.data.batch().unwrap()).unwrap();
        fitted = fitted.sub(&g.scale(0.5).unwrap()).unwrap();
    }
    let f = Fixture { global: fitted, ..f };
    let batch = f.data.batch().unwrap();
    let mut losses = vec![f.model.loss(&f.global, &batch).unwrap()];
    for ate in 1..=4 {
        let plan = AttackPlan::new(AttackKind::Llra).with_mode(AttackMode::Output).with_ate(ate);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let up = llra_update(&ctx(&f, &cfg, &agg), attacker(&f.data), &plan, &mut rng).unwrap();
        losses.push(f.model.loss(&up, &batch).unwrap());
    }
    assert!(losses.windows(2).all(|w| w[1] > w[0]), "{losses:?}");
}

#[test]
fn llra_modes_agree_without_noise() {
    let f = fixture();
    let agg = AggregationConfig::Fedavg;
    let cfg = noiseless(Protocol::Ldpsgd);
    let run = |mode| {
        let plan = AttackPlan::new(AttackKind::Llra).with_mode(mode).with_ate(3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        llra_update(&ctx(&f, &cfg, &agg), attacker(&f.data), &plan, &mut rng).unwrap()
    };
    assert_eq!(run(AttackMode::Input), run(AttackMode::Output));
}

#[test]
fn tmma_degenerate_counts() {
    let f = fixture();
    let agg = AggregationConfig::Fedavg;
    let cfg = noiseless(Protocol::Ldpsgd);
    let plan = AttackPlan::new(AttackKind::Tmma).with_mode(AttackMode::Output).with_ate(2);
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let mut e = ChaCha8Rng::seed_from_u64(1);
    let zero = EavesdropView { n_total: Some(4), n_malicious: Some(0), benign_uploads: None };
    assert!(matches!(
        tmma_update(&ctx(&f, &cfg, &agg), attacker(&f.data), &zero, &plan, &mut r, &mut e),
        Err(Error::Usage(_))
    ));
    let local = EavesdropView::default();
    assert!(tmma_update(&ctx(&f, &cfg, &agg), attacker(&f.data), &local, &plan, &mut r, &mut e).is_err());

    // n = N uploads the target itself
    let all = EavesdropView { n_total: Some(3), n_malicious: Some(3), benign_uploads: None };
    let up = tmma_update(&ctx(&f, &cfg, &agg), attacker(&f.data), &all, &plan, &mut r, &mut e).unwrap();
    let opts = RoundOptions { malicious: true, apply_ldp: false, epochs: 2 };
    let (target, _) = ldpfl_core::ldp::train_local(&f.model, &f.global, &f.data, &cfg, None, opts, &mut r).unwrap();
    for (a, b) in up.values().iter().zip(target.values()) {
        assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
    }
}

#[test]
fn ldpfl_attack_outputs_are_two_point() {
    let f = fixture();
    let cfg = ProtocolConfig::new(Protocol::Ldpfl, 0.1);
    let mk = AggregationConfig::Multikrum { f: 1, k: 3 };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let uploads: Vec<ParamVector> = (0..5)
        .map(|_| {
            let raw = benign_cloud(&f, &mut rng, 1, 0.05).pop().unwrap();
            ldpfl_core::ldp::data_perturbation(&raw, &f.ranges, cfg.epsilon, &mut rng).unwrap()
        })
        .collect();
    let view = global_view(uploads, 6, 1);
    let c = ctx(&f, &cfg, &mk);
    for mode in [AttackMode::Input, AttackMode::Output] {
        let llra = AttackPlan::new(AttackKind::Llra).with_mode(mode);
        let up = llra_update(&c, attacker(&f.data), &llra, &mut rng).unwrap();
        assert!(is_two_point(&up, &f.ranges, cfg.epsilon));
        let tmma = AttackPlan::new(AttackKind::Tmma).with_mode(mode);
        let mut e = ChaCha8Rng::seed_from_u64(2);
        let up = tmma_update(&c, attacker(&f.data), &view, &tmma, &mut rng, &mut e).unwrap();
        assert!(is_two_point(&up, &f.ranges, cfg.epsilon));
    }
    let adapa = AttackPlan::new(AttackKind::Adapa).with_ate(3);
    let (up, report) = adapa_generate(&c, &view, attacker(&f.data), &adapa, &mut rng).unwrap();
    assert!(is_two_point(&up, &f.ranges, cfg.epsilon) && report.satisfied);
}

#[test]
fn adapa_respects_its_projection() {
    let f = fixture();
    let cfg = ProtocolConfig::new(Protocol::Ldpsgd, 5.0);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for trial in 0..40 {
        let m = rng.gen_range(3..7);
        let uploads = benign_cloud(&f, &mut rng, m, 0.1);
        let view = global_view(uploads.clone(), m + 1, 1);
        let scal = rng.gen_range(0.1..2.0);
        let plan = AttackPlan {
            scal,
            ..AttackPlan::new(AttackKind::Adapa).with_ate(rng.gen_range(1..6))
        };

        let mk = AggregationConfig::Multikrum { f: 1, k: 2 };
        let (up, report) = adapa_generate(&ctx(&f, &cfg, &mk), &view, attacker(&f.data), &plan, &mut rng).unwrap();
        let center = geometric_median(&uploads, GEOMEDIAN_TOL, GEOMEDIAN_MAX_ITER).unwrap();
        let bound = scal
            * uploads
                .iter()
                .map(|u| u.distance(&center).unwrap())
                .fold(f64::INFINITY, f64::min);
        assert!(up.distance(&center).unwrap() <= bound + 1e-9, "trial {trial}");
        assert!(report.satisfied);

        let beta = rng.gen_range(0..=(m - 1) / 2);
        let tm = AggregationConfig::Trimmedmean { beta };
        let (up, report) = adapa_generate(&ctx(&f, &cfg, &tm), &view, attacker(&f.data), &plan, &mut rng).unwrap();
        let (lo, hi) = survivor_range(&uploads, beta).unwrap();
        for j in 0..up.dim() {
            assert!(lo[j] <= up.values()[j] && up.values()[j] <= hi[j]);
        }
        assert!(report.satisfied);
    }
}

#[test]
fn fit_on_def_constraints_hold_exactly() {
    let f = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mk = AggregationConfig::Multikrum { f: 1, k: 2 };
    for _ in 0..200 {
        let m = rng.gen_range(1..7);
        let spread = rng.gen_range(1e-3..10.0);
        let uploads = benign_cloud(&f, &mut rng, m, spread);
        let view = global_view(uploads.clone(), m + 1, 1);
        let far = rng.gen_range(0.1..100.0);
        let adv = benign_cloud(&f, &mut rng, 1, far).pop().unwrap();
        let scal = rng.gen_range(0.01..3.0);
        let out = fit_on_def(&adv, &view, Protocol::Ldpsgd, &mk, scal).unwrap();
        let center = geometric_median(&uploads, GEOMEDIAN_TOL, GEOMEDIAN_MAX_ITER).unwrap();
        let bound = scal
            * uploads
                .iter()
                .map(|u| u.distance(&center).unwrap())
                .fold(f64::INFINITY, f64::min);
        assert!(out.distance(&center).unwrap() <= bound);
        if adv.distance(&center).unwrap() <= bound {
            assert_eq!(out, adv);
        }
    }
}

#[test]
fn adapa_init_branches() {
    let f = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let uploads = benign_cloud(&f, &mut rng, 5, 0.3);
    let view = global_view(uploads.clone(), 6, 1);
    let mk = AggregationConfig::Multikrum { f: 1, k: 2 };
    let tm = AggregationConfig::Trimmedmean { beta: 1 };
    assert_eq!(adapa_init(Protocol::Ldpfl, &f.global, &view, &mk).unwrap(), f.global);
    assert_eq!(
        adapa_init(Protocol::Ldpsgd, &f.global, &view, &tm).unwrap(),
        ParamVector::mean(&uploads).unwrap()
    );
    assert_eq!(
        adapa_init(Protocol::Privatefl, &f.global, &view, &mk).unwrap(),
        geometric_median(&uploads, GEOMEDIAN_TOL, GEOMEDIAN_MAX_ITER).unwrap()
    );
    assert!(matches!(
        adapa_init(Protocol::Ldpsgd, &f.global, &EavesdropView::default(), &mk),
        Err(Error::Usage(_))
    ));
}

#[test]
fn adapa_upload_survives_multikrum() {
    // N = 6, one adversary, five benign updates in a tight cluster.
    let f = fixture();
    let cfg = ProtocolConfig::new(Protocol::Ldpsgd, 1.0);
    let mk = AggregationConfig::Multikrum { f: 1, k: 3 };
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let uploads = benign_cloud(&f, &mut rng, 5, 0.01);
    let view = global_view(uploads.clone(), 6, 1);
    let plan = AttackPlan::new(AttackKind::Adapa).with_ate(5);
    let (adv, _) = adapa_generate(&ctx(&f, &cfg, &mk), &view, attacker(&f.data), &plan, &mut rng).unwrap();
    assert!(adv.distance(&f.global).unwrap() > 0.0);
    let mut all = uploads;
    all.push(adv);
    let (_, selected) = multikrum(&all, 1, 3).unwrap();
    assert!(selected.contains(&5), "{selected:?}");
}

#[test]
fn privatefl_attacks_use_the_private_layer() {
    let f = fixture();
    let cfg = ProtocolConfig::new(Protocol::Privatefl, 0.2);
    let agg = AggregationConfig::Fedavg;
    let plan = AttackPlan::new(AttackKind::Llra).with_ate(2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(llra_update(&ctx(&f, &cfg, &agg), attacker(&f.data), &plan, &mut rng).is_err());
    let mut t = TransformLayer::identity(4);
    let data = AttackerData { data: &f.data, transform: Some(&mut t) };
    let up = llra_update(&ctx(&f, &cfg, &agg), data, &plan, &mut rng).unwrap();
    assert_eq!(up.dim(), f.model.dim());
    assert_ne!(t, TransformLayer::identity(4));
}

fn random_two_point(rng: &mut ChaCha8Rng, ranges: &LayerRanges, template: &ParamVector, eps: f64) -> ParamVector {
    let mut out = Vec::new();
    for ((_, vals), &r) in template.layers().zip(ranges.as_slice()) {
        let (lo, hi) = two_point_values(r, eps);
        out.extend(vals.iter().map(|_| if rng.gen() { hi } else { lo }));
    }
    template.with_values(out).unwrap()
}

#[test]
fn restricted_median_matches_count_oracle() {
    let f = fixture();
    let eps = 1.5;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let m = rng.gen_range(1..8);
        let uploads: Vec<ParamVector> = (0..m).map(|_| random_two_point(&mut rng, &f.ranges, &f.global, eps)).collect();
        let got = restricted_median(&uploads, &f.ranges, eps).unwrap();
        let mut j = 0;
        for ((_, vals), &r) in got.layers().zip(f.ranges.as_slice()) {
            let (lo, hi) = two_point_values(r, eps);
            for &v in vals {
                let highs = uploads.iter().filter(|u| u.values()[j] == hi).count();
                let lows = uploads.iter().filter(|u| u.values()[j] == lo).count();
                assert_eq!(v, if highs > lows { hi } else { lo });
                j += 1;
            }
        }
        assert_eq!(restricted_median(&uploads[..1], &f.ranges, eps).unwrap(), uploads[0]);
    }
}

#[test]
fn dimension_merge_matches_count_oracle() {
    let f = fixture();
    let eps = 0.9;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let hamming = |a: &ParamVector, b: &ParamVector| a.values().iter().zip(b.values()).filter(|(x, y)| x != y).count();
    for _ in 0..200 {
        let m = rng.gen_range(1..6);
        let uploads: Vec<ParamVector> = (0..m).map(|_| random_two_point(&mut rng, &f.ranges, &f.global, eps)).collect();
        let res = restricted_median(&uploads, &f.ranges, eps).unwrap();
        let adv = random_two_point(&mut rng, &f.ranges, &f.global, eps);
        let scal = rng.gen_range(0.0..=1.0);
        let merged = ldpfl_dimension_merge(&adv, &res, &uploads, scal, &mut rng).unwrap();
        let max_diff = uploads.iter().map(|u| hamming(u, &res)).min().unwrap();
        let want = ((scal * max_diff as f64).floor() as usize).min(hamming(&adv, &res));
        assert_eq!(hamming(&merged, &res), want);
        // every changed coordinate comes from the adversarial vector
        for j in 0..merged.dim() {
            let v = merged.values()[j];
            assert!(v == res.values()[j] || v == adv.values()[j]);
        }
    }
}
