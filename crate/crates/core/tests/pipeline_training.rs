//! Pipeline-level training behaviors that need real (short) runs.

use remapsr::datasets::{make_mapped_pairs, make_pairs, split_records, synth_corpus};
use remapsr::degradation::{resample_bicubic, DegradationSpec};
use remapsr::metrics::psnr;
use remapsr::models::{Model, ModelConfig};
use remapsr::pipeline::train_offshelf;
use remapsr::tensor::ops::l1_loss;
use remapsr::trainer::{train, TrainConfig};

#[test]
fn offshelf_x2_beats_bicubic_on_held_out_bicubic_inputs() {
    let records = synth_corpus(24, 64, 17).unwrap();
    let (gt_train, gt_test) = split_records(records, 18);
    let cfg = TrainConfig::desk(800).with_seed(18);
    let run = train_offshelf(2, &gt_train, &ModelConfig::desk(1), &cfg).unwrap();

    let eval = make_pairs(&gt_test, &DegradationSpec::bicubic_down(2), 2).unwrap();
    let mut model_db = 0.0;
    let mut bicubic_db = 0.0;
    for pair in &eval.pairs {
        let up_model = run.model.infer(&pair.input.pixels).unwrap();
        let up_bicubic = resample_bicubic(&pair.input.pixels, 2.0, false).unwrap();
        model_db += psnr(&up_model, &pair.target.pixels, 1.0).unwrap();
        bicubic_db += psnr(&up_bicubic, &pair.target.pixels, 1.0).unwrap();
    }
    model_db /= eval.len() as f64;
    bicubic_db /= eval.len() as f64;
    println!("offshelf x2 {model_db:.3} dB vs bicubic x2 {bicubic_db:.3} dB ({:+.3})",
        model_db - bicubic_db);
    assert!(
        model_db >= bicubic_db + 0.3,
        "trained x2 model at {model_db:.3} dB does not beat bicubic upsampling at {bicubic_db:.3} dB"
    );
}

#[test]
fn same_domain_mapping_converges_toward_identity() {
    // from == to at scale 1: the mapping should learn (nearly) the
    // identity; held-out reconstruction error drops well below the
    // freshly initialized model's.
    let records = synth_corpus(12, 64, 19).unwrap();
    let (gt_train, gt_test) = split_records(records, 9);
    let spec = DegradationSpec::bicubic_down(2); // any fixed domain
    let data = make_mapped_pairs(&gt_train, &spec, &spec).unwrap();
    assert_eq!(data.scale, 1);

    let init = Model::build(&ModelConfig::desk(1), 77).unwrap();
    let cfg = TrainConfig::desk(400).with_seed(20);
    let trained = train(init.clone(), &data, &cfg).unwrap().model;

    let held_out = make_mapped_pairs(&gt_test, &spec, &spec).unwrap();
    let l1 = |model: &Model<f32>| {
        let mut total = 0.0f64;
        for pair in &held_out.pairs {
            let mapped = model.infer(&pair.input.pixels).unwrap();
            total += l1_loss(&mapped, &pair.target.pixels).unwrap().scalar_value() as f64;
        }
        total / held_out.len() as f64
    };
    let (before, after) = (l1(&init), l1(&trained));
    println!("identity mapping: init l1 {before:.4}, trained l1 {after:.4}");
    assert!(
        after < before / 5.0,
        "trained l1 {after} not below a fifth of the initial {before}"
    );
}
