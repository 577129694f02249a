use demads_core::features::ClassLabel;
use demads_core::grid::generate::{generate_radial_grid, GridGenParams};
use demads_core::nn::{Loss, OptimizerKind, TrainConfig};
use demads_core::rt::{detect, pretrain, simulate_labeled_windows, MeterWindow, RtConfig, RtModel};
use demads_core::scenario::ScenarioConfig;

fn grid_windows(grid_seed: u64, days: u32, first_day: u32) -> Vec<MeterWindow> {
    let grid = generate_radial_grid(&GridGenParams::new(10, 2, 2, grid_seed)).unwrap();
    let mut cfg = ScenarioConfig::standard(grid, days, grid_seed + 1000);
    cfg.params.first_day = first_day;
    cfg.params.highres_step_s = 300;
    simulate_labeled_windows(&cfg, ClassLabel::Inverted).unwrap()
}

fn f_score(model: &RtModel, windows: &[MeterWindow]) -> f64 {
    let (mut tp, mut fp, mut fne) = (0.0, 0.0, 0.0);
    for w in windows {
        let flagged = detect(model, w.bus, w.day, &w.values, 0.5)
            .unwrap()
            .is_some();
        match (flagged, w.label == ClassLabel::Inverted) {
            (true, true) => tp += 1.0,
            (true, false) => fp += 1.0,
            (false, true) => fne += 1.0,
            _ => {}
        }
    }
    2.0 * tp / (2.0 * tp + fp + fne)
}

#[test]
fn pretrained_detector_transfers_to_unseen_grid() {
    let train: Vec<MeterWindow> = [1, 2, 3]
        .into_iter()
        .flat_map(|s| grid_windows(s, 20, 0))
        .collect();
    let test = grid_windows(4, 15, 100);
    let cfg = TrainConfig {
        optimizer: OptimizerKind::adam(3e-3),
        epochs: 20,
        batch_size: 16,
        loss: Loss::CrossEntropy,
        seed: 7,
    };
    let model = RtModel::new(RtConfig::default(), ClassLabel::Inverted, 7).unwrap();
    let (trained, report) = pretrain(&model, &train, &cfg).unwrap();
    assert!(report.loss_history.last().unwrap() < &report.loss_history[0]);
    let f_train = f_score(&trained, &train);
    let f = f_score(&trained, &test);
    eprintln!("loss {:?}", report.loss_history);
    eprintln!("train F {f_train:.3}, unseen-grid F {f:.3}");
    assert!(f >= 0.8, "unseen-grid F {f}");
}
