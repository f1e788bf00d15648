// temporary: phase timings for one finetune sample
use mvlt_core::config::ModelConfig;
use mvlt_core::model::MvltModel;
use mvlt_core::objectives::{finetune_ce_nodes, finetune_loss_from_ce};
use mvlt_core::config::LossVariant;
use mvlt_core::tensor::Tape;
use mvlt_core::text::encode_label;
use mvlt_core::vision::patchify;

fn main() {
    let cfg = ModelConfig::toy();
    let model = MvltModel::new(cfg.clone(), 0).unwrap();
    let img = mvlt_core::data::render_word("hello", 1, 32, 128, 1).unwrap();
    let patches = patchify(&img, 4).unwrap();
    let targets = encode_label("hello", cfg.l).unwrap();

    let reps = 10;
    let t = std::time::Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new(&model.store);
        let _ = model.encode_full(&mut tape, &patches);
    }
    println!("encode_full fwd: {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let t = std::time::Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new(&model.store);
        let v = model.encode_full(&mut tape, &patches);
        let logits = model.iterative_correct(&mut tape, v, 3);
        let ce = finetune_ce_nodes(&mut tape, &logits, &targets.indices);
        let _ = finetune_loss_from_ce(&mut tape, &ce, LossVariant::Paper).unwrap();
    }
    println!("full fwd (enc + 4 decodes + loss): {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);

    let t = std::time::Instant::now();
    for _ in 0..reps {
        let mut tape = Tape::new(&model.store);
        let v = model.encode_full(&mut tape, &patches);
        let logits = model.iterative_correct(&mut tape, v, 3);
        let ce = finetune_ce_nodes(&mut tape, &logits, &targets.indices);
        let loss = finetune_loss_from_ce(&mut tape, &ce, LossVariant::Paper).unwrap();
        tape.backward(loss);
        let _ = tape.into_param_grads();
    }
    println!("fwd + bwd: {:.1} ms", t.elapsed().as_secs_f64() * 1000.0 / reps as f64);
}
