use std::path::{Path, PathBuf};

use artmap::mlp::MlpParams;
use artmap::pipeline::{self, CacheOutcome, ConfigOverrides, PipelineConfig, RunOptions, PARTIAL_MARKER};
use artmap::raster::{load_image, save_image};
use artmap::synth;
use artmap::vgg::{VggWeights, VGG19_WIDTHS};
use artmap::Error;

/// A model whose output ignores the input and always favors `label`.
fn constant_model(label: usize) -> MlpParams {
    let mut p = MlpParams::zeros(&[27, 4, 2]).unwrap();
    p.biases_mut()[1][label] = 1.0;
    p
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new(model: &MlpParams) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        save_image(&synth::coastal_scene(32, 0).unwrap(), root.join("c.png")).unwrap();
        save_image(&synth::land_style(32, 1).unwrap(), root.join("l.png")).unwrap();
        save_image(&synth::water_style(32, 2).unwrap(), root.join("w.png")).unwrap();
        model.write(root.join("m.bin")).unwrap();
        VggWeights::<f32>::seeded(VGG19_WIDTHS, 0)
            .save(root.join("v.safetensors"))
            .unwrap();
        std::fs::write(
            root.join("cfg.toml"),
            "content_image = \"c.png\"\nstyle_images = [\"l.png\", \"w.png\"]\nmodel = \"m.bin\"\n\
             vgg_weights = \"v.safetensors\"\noutput_dir = \"out\"\n[nst]\niterations = 3\n",
        )
        .unwrap();
        Self { _dir: dir, root }
    }

    fn config(&self) -> PipelineConfig {
        PipelineConfig::load(self.root.join("cfg.toml"), &ConfigOverrides::default()).unwrap()
    }

    fn out(&self, name: &str) -> PathBuf {
        self.root.join("out").join(name)
    }
}

fn single() -> RunOptions {
    RunOptions { single_thread: true }
}

#[test]
fn all_land_collage_equals_land_stylization() {
    let fx = Fixture::new(&constant_model(0));
    let out = pipeline::execute(&fx.config(), &single()).unwrap();
    assert_eq!(out.report.histogram, vec![32 * 32, 0]);
    assert_eq!(out.collage, out.stylized[0]);
    // The absent category falls back to the content image and is not optimized.
    assert!(!out.report.categories[1].stylized);
    assert!(out.report.categories[1].final_loss.is_none());
    let content = load_image(fx.root.join("c.png")).unwrap();
    assert_eq!(out.stylized[1], content);
    assert_eq!(std::fs::read_to_string(fx.out("trace_1.jsonl")).unwrap(), "");
    assert_eq!(std::fs::read_to_string(fx.out("trace_0.jsonl")).unwrap().lines().count(), 3);
    assert_eq!(
        std::fs::read(fx.out("collage.png")).unwrap(),
        std::fs::read(fx.out("stylized_0.png")).unwrap()
    );
    pipeline::verify_artifacts(fx.root.join("out")).unwrap();
}

#[test]
fn report_lists_stages_and_echoes_config() {
    let fx = Fixture::new(&constant_model(1));
    let cfg = fx.config();
    let report = pipeline::run(&cfg, &single()).unwrap();
    let stages: Vec<&str> = report.stages.iter().map(|s| s.stage.as_str()).collect();
    assert_eq!(stages, ["load", "segment", "stylize", "compose"]);
    assert_eq!(report.histogram.iter().sum::<usize>(), 32 * 32);
    assert_eq!(report.config, cfg);
    assert_eq!(report.version, env!("CARGO_PKG_VERSION"));
    let on_disk = pipeline::RunReport::read(fx.out("report.json")).unwrap();
    assert_eq!(on_disk, report);
    assert!(!fx.out(PARTIAL_MARKER).exists());

    // A second run reuses the cached style targets.
    let again = pipeline::run(&cfg, &single()).unwrap();
    assert_eq!(report.categories[1].cache, Some(CacheOutcome::Miss));
    assert_eq!(again.categories[1].cache, Some(CacheOutcome::Hit));
}

#[test]
fn failing_stage_is_named_and_leaves_marker() {
    let fx = Fixture::new(&constant_model(0));
    // Valid file, wrong input width for window 3.
    MlpParams::zeros(&[12, 4, 2]).unwrap().write(fx.root.join("m.bin")).unwrap();
    let err = pipeline::run(&fx.config(), &single()).unwrap_err();
    assert!(matches!(err, Error::Stage { stage: "segment", .. }), "{err}");
    let marker = std::fs::read_to_string(fx.out(PARTIAL_MARKER)).unwrap();
    assert!(marker.contains("segment"), "{marker}");

    std::fs::write(fx.root.join("m.bin"), b"not a model").unwrap();
    let err = pipeline::run(&fx.config(), &single()).unwrap_err();
    assert!(matches!(err, Error::Stage { stage: "load", .. }), "{err}");
    assert!(fx.out(PARTIAL_MARKER).exists());
}

#[test]
fn checksum_mismatch_aborts_load() {
    let fx = Fixture::new(&constant_model(0));
    let cfg = PipelineConfig::load(
        fx.root.join("cfg.toml"),
        &ConfigOverrides {
            vgg_checksum: Some("0".repeat(64)),
            ..Default::default()
        },
    )
    .unwrap();
    let err = pipeline::run(&cfg, &single()).unwrap_err();
    match err {
        Error::Stage { stage, source } => {
            assert_eq!(stage, "load");
            assert!(matches!(*source, Error::Checksum { .. }), "{source}");
        }
        e => panic!("{e}"),
    }
}

#[test]
fn feather_mode_run_verifies() {
    let fx = Fixture::new(&MlpParams::init(&[27, 4, 2], 3).unwrap());
    let cfg = PipelineConfig::load(
        fx.root.join("cfg.toml"),
        &ConfigOverrides {
            mode: Some(artmap::collage::CompositeMode::Feather),
            iterations: Some(1),
            ..Default::default()
        },
    )
    .unwrap();
    pipeline::run(&cfg, &single()).unwrap();
    pipeline::verify_artifacts(fx.root.join("out")).unwrap();
}

#[test]
fn demo_assets_are_complete() {
    let dir = tempfile::tempdir().unwrap();
    pipeline::write_demo_assets(dir.path(), 0).unwrap();
    for f in ["coastal.png", "style_land.png", "style_water.png", "model.bin", "model_report.json", "demo.toml"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    assert!(!Path::new(&dir.path().join(".patches")).exists());
    // The shipped copies are regenerated from the same seed.
    let shipped = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../assets");
    assert_eq!(
        load_image(dir.path().join("coastal.png")).unwrap(),
        load_image(shipped.join("coastal.png")).unwrap()
    );
}
