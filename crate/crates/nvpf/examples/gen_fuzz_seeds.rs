//! Regenerate the fuzz corpus seeds: one small well-formed input per
//! format the fuzz targets parse.
//!
//! Usage: cargo run -p nvpf --example gen_fuzz_seeds -- crates/nvpf/fuzz/corpus

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use nvpf::config::{Mode, RunConfig};
use nvpf::data::write_dataset;
use nvpf::emonet::{EmoNetConfig, EmoNetParams};
use nvpf::flow::FlowModel;
use nvpf::serialize::{save_emonet, save_flow, save_temporal, MANIFEST_NAME};
use nvpf::synth::{gen_dataset, GenConfig};
use nvpf::temporal::TemporalModel;
use nvpf::tensor::{randn, Tensor};

fn seed_dir(root: &Path, target: &str) -> PathBuf {
    let dir = root.join(target);
    fs::create_dir_all(&dir).expect("create corpus dir");
    dir
}

fn main() {
    let root = PathBuf::from(
        std::env::args()
            .nth(1)
            .expect("usage: gen_fuzz_seeds <corpus-dir>"),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    // tensor_blob: the binary tensor wire format.
    let dir = seed_dir(&root, "tensor_blob");
    let grid = Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 0.5, 0.0, 3.25, -0.125]).unwrap();
    fs::write(dir.join("grid.bin"), grid.to_blob()).unwrap();
    let scalar = Tensor::from_vec(&[1], vec![42.0]).unwrap();
    fs::write(dir.join("scalar.bin"), scalar.to_blob()).unwrap();
    let kernel = randn(&[3, 3, 2, 4], &mut rng);
    fs::write(dir.join("kernel.bin"), kernel.to_blob()).unwrap();

    // dataset_records: line-delimited scene records.
    let dir = seed_dir(&root, "dataset_records");
    let mut gen = GenConfig::video_defaults();
    gen.videos = 2;
    gen.seed = 11;
    write_dataset(&dir.join("videos.jsonl"), &gen_dataset(&gen).unwrap()).unwrap();
    let mut gen = GenConfig::video_defaults();
    gen.videos = 3;
    gen.frames_per_video = 1;
    gen.groups_per_frame = 1;
    gen.flip_probability = 0.0;
    gen.bimodal = true;
    gen.seed = 12;
    write_dataset(&dir.join("groups.jsonl"), &gen_dataset(&gen).unwrap()).unwrap();

    // model_manifest: checkpoint headers for each model family.
    let dir = seed_dir(&root, "model_manifest");
    let staging = std::env::temp_dir().join(format!("nvpf-seeds-{}", std::process::id()));
    let flow = FlowModel::new(2, 2, 2, 4, true, &mut rng).unwrap();
    save_flow(&staging.join("flow"), &flow).unwrap();
    fs::copy(staging.join("flow").join(MANIFEST_NAME), dir.join("flow.json")).unwrap();
    let temporal = TemporalModel::new(2, 2, 3, 1, 1, 4, 3, &mut rng).unwrap();
    save_temporal(&staging.join("temporal"), &temporal).unwrap();
    fs::copy(
        staging.join("temporal").join(MANIFEST_NAME),
        dir.join("temporal.json"),
    )
    .unwrap();
    let emo_cfg = EmoNetConfig::toy((12, 12, 1), 8);
    let emo_params = EmoNetParams::new(&emo_cfg, &mut rng).unwrap();
    save_emonet(&staging.join("emonet"), &emo_cfg, &emo_params).unwrap();
    fs::copy(
        staging.join("emonet").join(MANIFEST_NAME),
        dir.join("emonet.json"),
    )
    .unwrap();
    fs::remove_dir_all(&staging).unwrap();

    // run_config: harness configs for each mode family.
    let dir = seed_dir(&root, "run_config");
    let mut cfg = RunConfig::new(Mode::TrainNvpf);
    cfg.dataset = Some(PathBuf::from("data/train.jsonl"));
    cfg.out_dir = Some(PathBuf::from("run"));
    cfg.learning_rate = 2e-3;
    cfg.epochs = 10;
    fs::write(
        dir.join("train-nvpf.json"),
        serde_json::to_string_pretty(&cfg).unwrap(),
    )
    .unwrap();
    let mut cfg = RunConfig::new(Mode::GenData);
    cfg.out_dir = Some(PathBuf::from("data"));
    cfg.gen = Some(GenConfig::video_defaults());
    fs::write(
        dir.join("gen-data.json"),
        serde_json::to_string_pretty(&cfg).unwrap(),
    )
    .unwrap();
    let mut cfg = RunConfig::new(Mode::Eval);
    cfg.model = Some(PathBuf::from("run/final"));
    cfg.dataset = Some(PathBuf::from("data/test.jsonl"));
    cfg.out_dir = Some(PathBuf::from("eval"));
    fs::write(
        dir.join("eval.json"),
        serde_json::to_string_pretty(&cfg).unwrap(),
    )
    .unwrap();

    // emonet_config: extractor architectures.
    let dir = seed_dir(&root, "emonet_config");
    fs::write(
        dir.join("full.json"),
        serde_json::to_string_pretty(&EmoNetConfig::full_scale(64)).unwrap(),
    )
    .unwrap();
    fs::write(
        dir.join("toy.json"),
        serde_json::to_string_pretty(&EmoNetConfig::toy((12, 12, 1), 8)).unwrap(),
    )
    .unwrap();

    println!("seeds written under {}", root.display());
}
