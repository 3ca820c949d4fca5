use powerformer::analysis::{self, Histogram};
use powerformer::data::{self, SplitSpec, Synthetic, WindowedDataset};
use powerformer::masks::MaskSpec;
use powerformer::model::{ModelConfig, Powerformer};
use powerformer::tensor::Tensor;

fn config(mask: MaskSpec) -> ModelConfig {
    ModelConfig {
        seq_len: 48,
        pred_len: 8,
        patch_len: 8,
        stride: 4,
        layers: 2,
        embed_width: 8,
        heads: 2,
        ff_width: 16,
        dropout: 0.0,
        head_dropout: 0.0,
        mask,
        banded_tau: None,
        seed: 11,
    }
}

fn windows() -> WindowedDataset {
    let ds = Synthetic::SineMixture.generate(300, 2);
    let spec = SplitSpec::ratio(300, 48, 0.7, 0.2).unwrap();
    let splits = data::split_and_standardize(&ds, &spec).unwrap();
    WindowedDataset::with_stride(&splits.train, 48, 8, 10).unwrap()
}

#[test]
fn zero_query_key_weights_give_a_score_spike() {
    let mut model = Powerformer::new(config(MaskSpec::none())).unwrap();
    let names: Vec<String> = model
        .params
        .names()
        .into_iter()
        .filter(|n| n.contains(".wq.") || n.contains(".wk."))
        .map(String::from)
        .collect();
    for n in names {
        let shape = model.params.get(&n).unwrap().shape().to_vec();
        model.params.insert(&n, Tensor::zeros(&shape));
    }
    let dist = analysis::collect_distributions(&model, &windows(), 40, 8).unwrap();
    let pre = dist.get("pre_mask_score/all").unwrap();
    assert_eq!(pre.bins(), 1);
    assert_eq!(pre.counts[0], pre.total);
    // uniform causal rows put every weight at 1/(i+1)
    let w = dist.get("weight/all").unwrap();
    let p = model.config.num_patches();
    let occupied = w.counts.iter().filter(|c| **c > 0).count();
    assert!(occupied <= p);
}

#[test]
fn histogram_mass_is_conserved() {
    let model = Powerformer::new(config(MaskSpec::weight_power_law(1.0))).unwrap();
    let data = windows();
    let dist = analysis::collect_distributions(&model, &data, 30, 7).unwrap();
    let p = model.config.num_patches() as u64;
    let expected = data.len() as u64 * 2 * 2 * p * (p + 1) / 2;
    for q in ["pre_mask_score", "post_mask_score", "causal_weight", "weight"] {
        let all = dist.get(&format!("{q}/all")).unwrap();
        assert_eq!(all.total, expected, "{q}");
        assert_eq!(all.counts.iter().sum::<u64>(), all.total);
        let layers: u64 = (0..2).map(|l| dist.get(&format!("{q}/layer{l}")).unwrap().total).sum();
        assert_eq!(layers, all.total);
    }
    let w = dist.get("weight/all").unwrap();
    assert!(w.edges[0] >= analysis::WEIGHT_FLOOR && *w.edges.last().unwrap() <= 1.0 + 1e-12);
}

#[test]
fn masking_changes_the_weight_distribution() {
    let data = windows();
    let tv = |mask: MaskSpec| {
        let model = Powerformer::new(config(mask)).unwrap();
        let dist = analysis::collect_distributions(&model, &data, 40, 16).unwrap();
        analysis::total_variation(dist.get("causal_weight/all").unwrap(), dist.get("weight/all").unwrap()).unwrap()
    };
    assert_eq!(tv(MaskSpec::none()), 0.0);
    assert!(tv(MaskSpec::weight_power_law(1.0)) > 0.05);
    assert!(tv(MaskSpec::butterworth(2, 3.0)) > 0.0);
}

#[test]
fn collection_is_deterministic_and_batch_independent() {
    let model = Powerformer::new(config(MaskSpec::similarity_power_law(0.5))).unwrap();
    let data = windows();
    let a = analysis::collect_distributions(&model, &data, 25, 3).unwrap();
    let b = analysis::collect_distributions(&model, &data, 25, 3).unwrap();
    let c = analysis::collect_distributions(&model, &data, 25, 64).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.get("weight/all"), c.get("weight/all"));
}

#[test]
fn banded_models_capture_the_band() {
    let full = Powerformer::new(config(MaskSpec::weight_power_law(1.0))).unwrap();
    let mut banded = full.clone();
    banded.config.banded_tau = Some(2);
    let (_, traces) = banded.forward(&[vec![0.5; 48]], true).unwrap();
    let p = full.config.num_patches();
    let w = traces[0].weights.data();
    for i in 0..p {
        for j in 0..p {
            if i >= j + 2 || j > i {
                assert_eq!(w[i * p + j], 0.0);
            }
        }
    }
}

#[test]
fn bimodality_detects_two_peaks() {
    let mut h = Histogram::linear("x", 0.0, 1.0, 20);
    for _ in 0..100 {
        h.add(0.12);
        h.add(0.88);
    }
    h.add(0.5);
    let r = analysis::bimodality_summary(&h);
    assert!(r.bimodal && r.modes.len() == 2 && r.valley_depth > 0.9);
    let mut one = Histogram::linear("y", 0.0, 1.0, 20);
    (0..50).for_each(|_| one.add(0.4));
    assert!(!analysis::bimodality_summary(&one).bimodal);
}

#[test]
fn writes_csv_svg_and_manifest() {
    let model = Powerformer::new(config(MaskSpec::weight_power_law(1.0))).unwrap();
    let dist = analysis::collect_distributions(&model, &windows(), 20, 16).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = analysis::write_distributions(dir.path(), &dist).unwrap();
    assert_eq!(manifest.histograms.len(), 4 * 3);
    for e in &manifest.histograms {
        assert!(dir.path().join(&e.csv).is_file());
        let svg = std::fs::read_to_string(dir.path().join(&e.svg)).unwrap();
        assert!(svg.starts_with("<svg"));
    }
    assert!(manifest.mask_effect_tv > 0.0);
    let json = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    assert!(json.contains("\"mask_effect_tv\""));
}
