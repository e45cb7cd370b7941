//! A dual model trained on planted data looks at the planted box.

use dual_mfa::data::{generate_planted, PlantedOptions, QuestionKind};
use dual_mfa::model::attention_maps;
use dual_mfa::trainer::train;
use dual_mfa::{DualMfaParameters, ModelConfig, TrainConfig};

#[test]
fn detection_attention_concentrates_on_planted_box() {
    let cfg = ModelConfig::desk();
    let opts = PlantedOptions::default();
    let train_set = generate_planted(2000, &cfg, 1, &opts).unwrap();
    let val = generate_planted(300, &cfg, 2, &opts).unwrap();
    let test = generate_planted(600, &cfg, 3, &opts).unwrap();
    let tcfg = TrainConfig {
        max_iters: 3000,
        ..TrainConfig::desk()
    };
    let out = train(DualMfaParameters::init(&cfg, 0), &cfg, &train_set, Some(&val), &tcfg).unwrap();

    let maps = attention_maps(&out.params, &cfg, &test.instances).unwrap();
    let threshold = 3.0 / cfg.num_boxes as f64;
    let (mut total, mut focused) = (0, 0);
    for ((att, _), inst) in maps.iter().zip(&test.instances) {
        let spec = inst.planted.unwrap();
        if spec.kind != QuestionKind::Detection {
            continue;
        }
        let a2 = att.a2.as_ref().unwrap();
        let best = (0..cfg.glimpses).map(|g| a2.at(&[g, spec.location])).fold(0.0, f64::max);
        total += 1;
        focused += usize::from(best > threshold);
    }
    let frac = focused as f64 / total as f64;
    assert!(frac >= 0.8, "{focused}/{total} focused");
}
