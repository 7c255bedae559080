use cseg_core::harness::{
    ablation_csv, require_checkpoint, run_ablation, run_experiment, stage_file, ExperimentConfig, ALL_CELLS,
};
use cseg_core::model::{LossMode, Sharing};
use cseg_core::Error;

fn tiny(dir: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(21);
    cfg.data.size = 32;
    cfg.data.train_count = 6;
    cfg.data.interactive_count = 4;
    cfg.data.eval_count = 3;
    cfg.train.stage1_steps = 12;
    cfg.train.stage2_steps = 6;
    cfg.curve.rounds = 3;
    cfg.output.dir = dir.to_path_buf();
    cfg
}

#[test]
fn experiment_writes_a_well_formed_curve() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(tmp.path());
    cfg.output.overlays = true;
    let out = run_experiment(&cfg).unwrap();
    let text = std::fs::read_to_string(&out.csv_path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "round,scribbles_per_region,mean_iou");
    assert_eq!(lines.len(), cfg.curve.rounds + 2);
    let mut last_spr = 0.0;
    for (r, line) in lines[1..].iter().enumerate() {
        let cols: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert_eq!(cols[0] as usize, r);
        assert!(cols[1] >= last_spr);
        assert!((0.0..=1.0).contains(&cols[2]));
        last_spr = cols[1];
    }
    assert!(tmp.path().join(stage_file(1, LossMode::Pixelwise, Sharing::Shared)).exists());
    assert!(tmp.path().join(stage_file(2, LossMode::Pixelwise, Sharing::Shared)).exists());
    let overlay = image::open(tmp.path().join("overlays_free").join("scene2000000_round3.png")).unwrap();
    assert_eq!((overlay.width(), overlay.height()), (32, 32));
}

#[test]
fn experiment_is_a_function_of_its_config() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = std::fs::read(run_experiment(&tiny(a.path())).unwrap().csv_path).unwrap();
    let second = std::fs::read(run_experiment(&tiny(b.path())).unwrap().csv_path).unwrap();
    assert_eq!(first, second);
    // Rerunning in place reuses the checkpoints and gives the same bytes.
    let again = std::fs::read(run_experiment(&tiny(a.path())).unwrap().csv_path).unwrap();
    assert_eq!(first, again);
    let ckpt_a = std::fs::read(a.path().join(stage_file(2, LossMode::Pixelwise, Sharing::Shared))).unwrap();
    let ckpt_b = std::fs::read(b.path().join(stage_file(2, LossMode::Pixelwise, Sharing::Shared))).unwrap();
    assert_eq!(ckpt_a, ckpt_b);
}

#[test]
fn ablation_reports_all_four_cells() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(tmp.path());
    cfg.train.stage1_steps = 4;
    let run = run_ablation(&cfg, &ALL_CELLS, Some(tmp.path())).unwrap();
    let csv = ablation_csv(&run.cells);
    assert_eq!(
        csv.lines().map(|l| l.rsplit_once(',').unwrap().0).collect::<Vec<_>>(),
        ["loss,sharing", "maskwise,unshared", "maskwise,shared", "pixelwise,unshared", "pixelwise,shared"]
    );
    for (loss, sharing) in ALL_CELLS {
        assert!(tmp.path().join(stage_file(1, loss, sharing)).exists());
    }
}

#[test]
fn missing_checkpoint_is_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("stage2_pixelwise_shared.ckpt");
    assert!(matches!(require_checkpoint(&path), Err(Error::MissingFile(p)) if p == path));
}
