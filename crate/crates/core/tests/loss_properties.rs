use proptest::prelude::*;
use selcon_core::autodiff::Graph;
use selcon_core::loss::{init_contrastive_loss, selective_contrastive_loss, LossConfig};
use selcon_core::{MemoryBanks, SampleSelection, Tensor};

/// Bank whose mixture rows have the given dot products with `e0` (2-d keys).
fn bank(dots: &[f64]) -> MemoryBanks {
    let mut b = MemoryBanks::new(dots.len(), 2, 1).unwrap();
    for (k, &c) in dots.iter().enumerate() {
        let s = (1.0 - c * c).max(0.0).sqrt();
        b.update_mixture_positives(&[k], Some(&[c, s]), None).unwrap();
    }
    b
}

fn selective(dots: &[f64], n_pos: usize, cfg: &LossConfig) -> f64 {
    let banks = bank(dots);
    let sel = SampleSelection {
        anchor: 0,
        positives: (0..n_pos).collect(),
        negatives: (n_pos..dots.len()).collect(),
    };
    let mut g = Graph::new();
    let v = g.input(Tensor::vector(vec![1.0, 0.0]));
    let l = selective_contrastive_loss(&mut g, v, &banks, &sel, cfg).unwrap();
    g.value(l).item()
}

fn dots_strategy() -> impl Strategy<Value = (Vec<f64>, usize)> {
    (2usize..20).prop_flat_map(|n| (prop::collection::vec(-0.9f64..0.9, n), 1..n))
}

proptest! {
    #[test]
    fn raising_all_positives_never_increases_loss((dots, n_pos) in dots_strategy()) {
        // A single low-weight positive can raise the loss as it moves closer,
        // since it adds more to the denominator than to the numerator.
        let cfg = LossConfig::default();
        let before = selective(&dots, n_pos, &cfg);
        let mut up = dots.clone();
        for d in up.iter_mut().take(n_pos) {
            *d += 0.05;
        }
        prop_assert!(selective(&up, n_pos, &cfg) <= before + 1e-12);
    }

    #[test]
    fn raising_a_negative_never_decreases_loss((dots, n_pos) in dots_strategy(), pick in any::<prop::sample::Index>()) {
        let cfg = LossConfig::default();
        let k = n_pos + pick.index(dots.len() - n_pos);
        let before = selective(&dots, n_pos, &cfg);
        let mut up = dots.clone();
        up[k] += 0.05;
        prop_assert!(selective(&up, n_pos, &cfg) >= before - 1e-12);
    }

    #[test]
    fn temperature_consistency((dots, n_pos) in dots_strategy(), c in 0.2f64..0.9) {
        // Scaling every dot product by c and tau by c leaves the loss unchanged.
        let base = LossConfig { tau: 0.1, ..LossConfig::default() };
        let scaled_cfg = LossConfig { tau: 0.1 * c, ..base.clone() };
        let scaled: Vec<f64> = dots.iter().map(|d| d * c).collect();
        let a = selective(&dots, n_pos, &base);
        let b = selective(&scaled, n_pos, &scaled_cfg);
        prop_assert!((a - b).abs() < 1e-9, "{} vs {}", a, b);
    }

    #[test]
    fn finite_for_small_tau((dots, n_pos) in dots_strategy(), tau in 0.01f64..0.05) {
        let cfg = LossConfig { tau, ..LossConfig::default() };
        prop_assert!(selective(&dots, n_pos, &cfg).is_finite());
    }

    #[test]
    fn init_loss_is_non_negative(dots in prop::collection::vec(-0.9f64..0.9, 1..30)) {
        let banks = bank(&dots);
        let mut g = Graph::new();
        let v = g.input(Tensor::vector(vec![1.0, 0.0]));
        let negatives: Vec<usize> = (1..dots.len()).collect();
        let l = init_contrastive_loss(&mut g, v, &banks, 0, &negatives, &LossConfig::default()).unwrap();
        let value = g.value(l).item();
        prop_assert!(value >= 0.0);
        prop_assert!(value <= (dots.len() as f64).ln() + (2.0 * 1.8 / 0.05) + 1e-9);
    }
}

#[test]
fn sign_depends_on_largest_factor() {
    // Every default factor is at most 1, so the loss stays non-negative even
    // though the factors sum past 1.
    let mut dots = vec![1.0; 8];
    dots.extend(vec![-1.0; 4]);
    let l = selective(&dots, 8, &LossConfig::default());
    assert!(l >= 0.0 && (l - (8.0f64 / 1.265625).ln()).abs() < 1e-9, "{l}");
    // A factor above 1 lets it go negative.
    let big = LossConfig { alpha: 10.0, lambda_t: 0.0, ..LossConfig::default() };
    let l = selective(&[1.0, 1.0, -1.0], 2, &big);
    assert!(l < 0.0, "{l}");
}
