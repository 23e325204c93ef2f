use super::*;
use crate::backbone::prompted_forward;
use crate::model::Method;
use crate::numerics::Tensor;
use crate::sivi_prompt::{apply_masks, concat_global, encode_psi, unstack, PromptConfig};
use crate::testutil;
use proptest::prelude::*;

struct Fx {
    spec: ModelSpec,
    backbone: BackboneParams,
    model: GlobalModel,
    head: HeadParams,
}

fn fx(method: Method, keep_prob: f64) -> Fx {
    let vit = testutil::tiny_vit();
    let pc = PromptConfig {
        instance_tokens: 1,
        global_tokens: 2,
        global_depth: 2,
        instance_depth: 2,
        keep_prob,
        ..PromptConfig::default()
    };
    let spec = ModelSpec::new(&vit, method, &pc).unwrap();
    let backbone = BackboneParams::init(&vit, RngKey::new(1)).unwrap();
    let mut model = GlobalModel::init(&spec, RngKey::new(2));
    // a visibly input-dependent encoder
    if let Some(e) = &mut model.encoder {
        for t in e.tensors_mut() {
            for x in t.data_mut() {
                *x *= 5.0;
            }
        }
    }
    let head = HeadParams::random(vit.dim, vit.num_classes, 1.0, RngKey::new(3));
    Fx {
        spec,
        backbone,
        model,
        head,
    }
}

impl Fx {
    fn predict(&self, s: &Sample, v: usize, key: RngKey) -> PredictionResult {
        predict(&self.spec, &self.backbone, &self.model, &self.head, s, v, key).unwrap()
    }
}

#[test]
fn argmax_ties_go_low() {
    assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    assert_eq!(argmax(&[0.5, 0.5]), 0);
    assert_eq!(argmax(&[0.1, 0.2, 0.7]), 2);
}

#[test]
fn pi_one_is_v_invariant_exactly() {
    let f = fx(Method::PFedBayesPt, 1.0);
    let (_, s) = testutil::sample(&f.backbone, 4, 0);
    let one = f.predict(&s, 1, RngKey::new(9));
    for v in [2, 3, 5, 10] {
        let many = f.predict(&s, v, RngKey::new(9 + v as u64));
        assert_eq!(many.mean, one.mean);
        assert_eq!(many.class, one.class);
    }
}

#[test]
fn fixed_seed_is_bit_identical() {
    let f = fx(Method::PFedBayesPt, 0.5);
    let (_, s) = testutil::sample(&f.backbone, 5, 0);
    assert_eq!(f.predict(&s, 4, RngKey::new(1)), f.predict(&s, 4, RngKey::new(1)));
}

#[test]
fn mean_matches_manual_average_of_single_mask_predictions() {
    let f = fx(Method::PFedBayesPt, 0.5);
    let (image, s) = testutil::sample(&f.backbone, 6, 0);
    let key = RngKey::new(21);
    let res = f.predict(&s, 3, key);
    let mut manual = vec![0.0; 3];
    for v in 0..3u64 {
        let mut rng = key.child(v).rng();
        let masks = sample_masks(2, f.spec.vit.tokens(), 0.5, &mut rng).unwrap();
        let psi = encode_psi(&apply_masks(&s.pass.features, &masks).unwrap(), f.model.encoder.as_ref().unwrap()).unwrap();
        let blocks = concat_global(f.model.global_prompt.as_ref(), Some(&psi.mu)).unwrap().unwrap();
        let prompts: Vec<Option<Tensor>> = unstack(&blocks).unwrap().into_iter().map(Some).collect();
        let logits = prompted_forward(&image, &f.backbone, &prompts, &f.head).unwrap();
        let p = softmax(&logits);
        assert!(p.data().iter().zip(&res.per_sample[v as usize]).all(|(a, b)| (a - b).abs() < 1e-12));
        for c in 0..3 {
            manual[c] += p.data()[c] / 3.0;
        }
    }
    for c in 0..3 {
        assert!((manual[c] - res.mean[c]).abs() < 1e-12);
    }
    assert!((res.mean.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    // masks genuinely vary the prediction here
    assert_ne!(res.per_sample[0], res.per_sample[1]);
}

#[test]
fn deterministic_variant_ignores_v() {
    let f = fx(Method::PFedBayesPtD, 0.9);
    let (_, s) = testutil::sample(&f.backbone, 7, 0);
    assert_eq!(f.predict(&s, 1, RngKey::new(1)).mean, f.predict(&s, 7, RngKey::new(2)).mean);
}

#[test]
fn report_arithmetic() {
    let r = EvalReport::from_accuracies(vec![1.0, 0.5]).unwrap();
    assert_eq!((r.average, r.worst), (0.75, 0.5));
    let r = EvalReport::from_accuracies(vec![0.3; 4]).unwrap();
    assert_eq!((r.average, r.worst), (0.3, 0.3));
}

#[test]
fn evaluate_matches_brute_force_loop_and_rejects_empty_tests() {
    let f = fx(Method::PFedBayesPt, 0.7);
    let tests: Vec<Vec<Sample>> = (0..3)
        .map(|k| (0..5).map(|i| testutil::sample(&f.backbone, 100 * k + i, (i % 3) as usize).1).collect())
        .collect();
    let clients: Vec<EvalClient> = tests
        .iter()
        .enumerate()
        .map(|(k, t)| EvalClient {
            id: k,
            test: t,
            head: &f.head,
        })
        .collect();
    let key = RngKey::new(4);
    let report = evaluate(&f.spec, &f.backbone, &f.model, &clients, 3, key).unwrap();
    for (k, t) in tests.iter().enumerate() {
        let mut correct = 0;
        for s in t {
            let p = f.predict(s, 3, key.child(k as u64).child(s.id as u64));
            correct += (p.class == s.label) as usize;
        }
        assert_eq!(report.per_client[k], correct as f64 / 5.0);
    }
    let empty: Vec<Sample> = vec![];
    let bad = [EvalClient {
        id: 9,
        test: &empty,
        head: &f.head,
    }];
    assert!(matches!(
        evaluate(&f.spec, &f.backbone, &f.model, &bad, 1, key),
        Err(Error::Config(_))
    ));
}

proptest! {
    #[test]
    fn argmax_invariant_under_positive_scaling(xs in prop::collection::vec(0.0f64..1.0, 1..12), c in 1e-3f64..1e3) {
        let scaled: Vec<f64> = xs.iter().map(|x| x * c).collect();
        prop_assert_eq!(argmax(&xs), argmax(&scaled));
    }
}
