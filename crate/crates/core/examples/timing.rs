// temporary: step timing at TOY scale
use mvlt_core::config::{ModelConfig, TrainConfig};
use mvlt_core::data::{make_dataset, CanvasSize, WordSource};
use mvlt_core::model::MvltModel;
use mvlt_core::optim::AdamWState;
use mvlt_core::trainer::{finetune, pretrain, PretrainData};

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = make_dataset(
        64, 0, &WordSource::default(), dir.path(), true,
        CanvasSize { h: 32, w: 128, c: 1 }, 0,
    ).unwrap();
    let data = PretrainData::load(&manifest, None).unwrap();
    let mut model = MvltModel::new(ModelConfig::toy(), 0).unwrap();
    let mut opt = AdamWState::new(&model.store);
    let mut cfg = TrainConfig::pretrain_default();
    cfg.batch_labeled = 8;
    let t = std::time::Instant::now();
    pretrain(&mut model, &mut opt, &data, &cfg, 0, 10, None).unwrap();
    println!("pretrain batch=8: {:.3} s/step", t.elapsed().as_secs_f64() / 10.0);

    let images = mvlt_core::trainer::load_labeled_images(&manifest).unwrap();
    let mut fcfg = TrainConfig::finetune_default();
    fcfg.batch_labeled = 8;
    let mut fopt = AdamWState::new(&model.store);
    let t = std::time::Instant::now();
    finetune(&mut model, &mut fopt, &images, &fcfg, 0, 5, None).unwrap();
    println!("finetune batch=8 K=3: {:.3} s/step", t.elapsed().as_secs_f64() / 5.0);
}
