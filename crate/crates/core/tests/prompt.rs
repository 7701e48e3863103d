use hazebridge::harness::data::{procedural_images, synth_haze_dataset};
use hazebridge::prompt::{
    embed_all, prompt_accuracy, prompt_bce_loss, train_prompt, PromptConfig, PromptState,
    ToyEncoder,
};
use hazebridge_tensor::Tensor;

#[test]
fn bce_at_one_half_is_ln_two() {
    let half = Tensor::new(vec![0.5], &[1, 1]).unwrap();
    assert_eq!(
        prompt_bce_loss(1.0, &half).unwrap().item().unwrap(),
        std::f64::consts::LN_2
    );
    assert_eq!(
        prompt_bce_loss(0.0, &half).unwrap().item().unwrap(),
        std::f64::consts::LN_2
    );
}

#[test]
fn trained_prompt_separates_held_out_hazy_images() {
    let clear = procedural_images(160, 32, 3);
    let data = synth_haze_dataset(&clear, [0.8, 1.0], [0.35, 0.65], 30, 3).unwrap();
    let enc = ToyEncoder::new(3, 32);
    let cfg = PromptConfig::default();
    let prompt = train_prompt(&data.hazy, &data.clear, &enc, &cfg, 3).unwrap();
    assert_eq!(prompt.steps, cfg.steps);
    let (eh, ec) = (
        embed_all(&data.test_hazy, &enc).unwrap(),
        embed_all(&data.test_truth, &enc).unwrap(),
    );
    let acc = prompt_accuracy(&eh, &ec, &prompt).unwrap();
    assert!(acc > 0.95, "held-out accuracy {acc}");
    let untrained = prompt_accuracy(&eh, &ec, &PromptState::random(3, 32)).unwrap();
    assert!(acc >= untrained);
}
