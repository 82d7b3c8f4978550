use amsf_core::datasets::{generate_in_memory, SyntheticRecipe};
use amsf_core::harness::{train, LoadedData, RunConfig};

const WINDOW: usize = 20;

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

/// Window means of the loss may only rise by sampling noise (two standard
/// errors of the difference), and the run must end well below its start.
#[test]
fn smoothed_loss_trends_down_over_a_short_run() {
    let text = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/desk.toml")).unwrap();
    let overrides = ["train.episodes=200", "train.warmup=20", "train.milestones=[]", "train.lr=3e-3"].map(String::from);
    let cfg = RunConfig::from_toml(&text, &overrides).unwrap();
    let data = LoadedData::from_pairs(generate_in_memory(&SyntheticRecipe::default()).unwrap(), &cfg.data).unwrap();
    let out = train(&cfg, &data, None).unwrap();
    assert_eq!(out.history.len(), 200);

    let losses: Vec<f64> = out.history.iter().map(|r| r.loss).collect();
    let windows: Vec<(f64, f64)> = losses.chunks_exact(WINDOW).map(mean_and_se).collect();
    let means: Vec<f64> = windows.iter().map(|w| w.0).collect();
    for pair in windows.windows(2) {
        let ((a, sa), (b, sb)) = (pair[0], pair[1]);
        let slack = 2.0 * (sa * sa + sb * sb).sqrt();
        assert!(b <= a + slack, "smoothed loss rose beyond noise: {means:.4?}");
    }
    let (first, last) = (means[0], means[means.len() - 1]);
    assert!(last < first - 0.1, "no clear decrease: {means:.4?}");
}
