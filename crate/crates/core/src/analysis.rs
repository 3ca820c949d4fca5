//! Attention score and weight distributions, a mode report for weight
//! histograms, the constant-score envelope check, and SVG step plots.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionParams, AttentionTrace};
use crate::data::WindowedDataset;
use crate::error::{Error, Result};
use crate::masks::{self, MaskSpec};
use crate::model::Powerformer;
use crate::tensor::{Tensor, MASK_THRESHOLD};

/// Smallest weight resolved by the log-spaced bins.
pub const WEIGHT_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinScale {
    Linear,
    Log,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub tag: String,
    pub scale: BinScale,
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub total: u64,
}

impl Histogram {
    /// `bins` log-spaced bins over `[1e-12, 1]`; smaller values land in the first bin.
    pub fn log_weights(tag: &str, bins: usize) -> Self {
        let bins = bins.max(1);
        let lo = WEIGHT_FLOOR.log10();
        let edges = (0..=bins)
            .map(|k| 10f64.powf(lo + (0.0 - lo) * k as f64 / bins as f64))
            .collect();
        Self::with_edges(tag, BinScale::Log, edges)
    }

    /// `bins` equal bins over `[lo, hi]`; a degenerate range gets one unit-wide bin.
    pub fn linear(tag: &str, lo: f64, hi: f64, bins: usize) -> Self {
        if hi.is_nan() || lo.is_nan() || hi <= lo {
            return Self::with_edges(tag, BinScale::Linear, vec![lo - 0.5, lo + 0.5]);
        }
        let bins = bins.max(1);
        let edges = (0..=bins).map(|k| lo + (hi - lo) * k as f64 / bins as f64).collect();
        Self::with_edges(tag, BinScale::Linear, edges)
    }

    fn with_edges(tag: &str, scale: BinScale, edges: Vec<f64>) -> Self {
        let n = edges.len() - 1;
        Self {
            tag: tag.to_string(),
            scale,
            edges,
            counts: vec![0; n],
            total: 0,
        }
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    /// Adds a value, clamping it into the outermost bins.
    pub fn add(&mut self, v: f64) {
        let k = self.edges.partition_point(|e| *e <= v);
        let bin = k.saturating_sub(1).min(self.bins() - 1);
        self.counts[bin] += 1;
        self.total += 1;
    }

    pub fn merge(&mut self, other: &Histogram) -> Result<()> {
        if self.edges != other.edges {
            return Err(Error::contract(format!(
                "cannot merge histograms `{}` and `{}` with different edges",
                self.tag, other.tag
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total += other.total;
        Ok(())
    }

    /// Bin midpoints; geometric for log bins.
    pub fn centers(&self) -> Vec<f64> {
        self.edges
            .windows(2)
            .map(|e| match self.scale {
                BinScale::Linear => 0.5 * (e[0] + e[1]),
                BinScale::Log => (e[0] * e[1]).sqrt(),
            })
            .collect()
    }

    pub fn density(&self) -> Vec<f64> {
        let t = self.total.max(1) as f64;
        self.counts.iter().map(|c| *c as f64 / t).collect()
    }

    /// Columns `edge_lo, edge_hi, count`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["edge_lo", "edge_hi", "count"])?;
        for (e, c) in self.edges.windows(2).zip(&self.counts) {
            w.write_record([e[0].to_string(), e[1].to_string(), c.to_string()])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Half the L1 distance between the normalized histograms.
pub fn total_variation(a: &Histogram, b: &Histogram) -> Result<f64> {
    if a.edges != b.edges {
        return Err(Error::contract("total variation needs identical bin edges"));
    }
    Ok(0.5 * a.density().iter().zip(b.density()).map(|(p, q)| (p - q).abs()).sum::<f64>())
}

/// Captured quantity, one histogram family each.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quantity {
    PreMaskScore,
    PostMaskScore,
    CausalWeight,
    Weight,
}

impl Quantity {
    pub const ALL: [Quantity; 4] = [Self::PreMaskScore, Self::PostMaskScore, Self::CausalWeight, Self::Weight];

    pub fn name(self) -> &'static str {
        match self {
            Self::PreMaskScore => "pre_mask_score",
            Self::PostMaskScore => "post_mask_score",
            Self::CausalWeight => "causal_weight",
            Self::Weight => "weight",
        }
    }

    fn is_weight(self) -> bool {
        matches!(self, Self::CausalWeight | Self::Weight)
    }

    fn source(self, t: &AttentionTrace) -> &Tensor {
        match self {
            Self::PreMaskScore => &t.pre_scores,
            Self::PostMaskScore => &t.post_scores,
            Self::CausalWeight => &t.causal_weights,
            Self::Weight => &t.weights,
        }
    }
}

/// Causal-valid entries of one quantity; `-inf` scores are skipped.
fn for_each_entry(t: &AttentionTrace, q: Quantity, mut f: impl FnMut(f64)) {
    let p = t.size();
    let data = q.source(t).data();
    for b in 0..t.batch() {
        for i in 0..p {
            for j in 0..=i {
                let v = data[b * p * p + i * p + j];
                if q.is_weight() || v > MASK_THRESHOLD {
                    f(v);
                }
            }
        }
    }
}

/// Histograms keyed `<quantity>/all` and `<quantity>/layer<l>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Distributions {
    pub histograms: Vec<Histogram>,
    pub windows: usize,
}

impl Distributions {
    pub fn get(&self, tag: &str) -> Option<&Histogram> {
        self.histograms.iter().find(|h| h.tag == tag)
    }
}

fn traces_for(model: &Powerformer, data: &WindowedDataset, idx: &[usize]) -> Result<Vec<AttentionTrace>> {
    let xs: Vec<&[f64]> = idx.iter().map(|&i| data.example(i).0).collect();
    Ok(model.build(&xs, None, true)?.traces)
}

/// Aggregates captured scores and weights over every window, layer and head.
/// Score bins are auto-ranged in a first pass.
pub fn collect_distributions(model: &Powerformer, data: &WindowedDataset, bins: usize, batch: usize) -> Result<Distributions> {
    if data.is_empty() {
        return Err(Error::Empty("distribution collection over zero windows".into()));
    }
    let order: Vec<usize> = (0..data.len()).collect();
    let chunks: Vec<&[usize]> = order.chunks(batch.max(1)).collect();
    let layers = model.config.layers;

    let mut ranges = [(f64::INFINITY, f64::NEG_INFINITY); 2];
    for chunk in &chunks {
        for t in traces_for(model, data, chunk)? {
            for (slot, q) in [Quantity::PreMaskScore, Quantity::PostMaskScore].into_iter().enumerate() {
                let r = &mut ranges[slot];
                for_each_entry(&t, q, |v| {
                    r.0 = r.0.min(v);
                    r.1 = r.1.max(v);
                });
            }
        }
    }

    let fresh = |q: Quantity, tag: &str| match q {
        Quantity::PreMaskScore => Histogram::linear(tag, ranges[0].0, ranges[0].1, bins),
        Quantity::PostMaskScore => Histogram::linear(tag, ranges[1].0, ranges[1].1, bins),
        _ => Histogram::log_weights(tag, bins),
    };
    let mut all: Vec<Histogram> = Quantity::ALL.iter().map(|q| fresh(*q, &format!("{}/all", q.name()))).collect();
    let mut per_layer: Vec<Vec<Histogram>> = (0..layers)
        .map(|l| Quantity::ALL.iter().map(|q| fresh(*q, &format!("{}/layer{l}", q.name()))).collect())
        .collect();
    for chunk in &chunks {
        for t in traces_for(model, data, chunk)? {
            for (k, q) in Quantity::ALL.into_iter().enumerate() {
                let (a, l) = (&mut all[k], &mut per_layer[t.layer][k]);
                for_each_entry(&t, q, |v| {
                    a.add(v);
                    l.add(v);
                });
            }
        }
    }
    all.extend(per_layer.into_iter().flatten());
    Ok(Distributions {
        histograms: all,
        windows: data.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub tag: String,
    /// Bin centers of the local maxima, strongest first.
    pub modes: Vec<f64>,
    /// `1 - valley / smaller_peak` between the two strongest modes.
    pub valley_depth: f64,
    pub bimodal: bool,
}

/// Local maxima of the `[1, 2, 1]`-smoothed counts that reach 5% of the
/// tallest bin.
pub fn bimodality_summary(h: &Histogram) -> ModeReport {
    let c: Vec<f64> = h.counts.iter().map(|v| *v as f64).collect();
    let n = c.len();
    let at = |i: isize| if i < 0 || i as usize >= n { 0.0 } else { c[i as usize] };
    let smooth: Vec<f64> = (0..n as isize)
        .map(|i| 0.25 * at(i - 1) + 0.5 * at(i) + 0.25 * at(i + 1))
        .collect();
    let top = smooth.iter().copied().fold(0.0, f64::max);
    let centers = h.centers();
    let mut peaks: Vec<usize> = (0..n)
        .filter(|&i| {
            let left = if i == 0 { 0.0 } else { smooth[i - 1] };
            let right = if i + 1 == n { 0.0 } else { smooth[i + 1] };
            smooth[i] > left && smooth[i] >= right && smooth[i] >= 0.05 * top
        })
        .collect();
    peaks.sort_by(|a, b| smooth[*b].total_cmp(&smooth[*a]));
    let valley_depth = match peaks[..] {
        [a, b, ..] => {
            let (lo, hi) = (a.min(b), a.max(b));
            let valley = smooth[lo..=hi].iter().copied().fold(f64::INFINITY, f64::min);
            1.0 - valley / smooth[a].min(smooth[b])
        }
        _ => 0.0,
    };
    ModeReport {
        tag: h.tag.clone(),
        modes: peaks.iter().map(|&i| centers[i]).collect(),
        valley_depth,
        bimodal: peaks.len() >= 2 && valley_depth > 0.1,
    }
}

/// Closed-form weights of row `i` when every score in the row is equal:
/// `exp(f(i - j))` normalized over `j <= i`.
pub fn envelope_row(spec: &MaskSpec, size: usize, i: usize) -> Result<Vec<f64>> {
    let mask = masks::combined_mask(spec, size)?;
    let raw: Vec<f64> = (0..=i).map(|j| mask.at(i, j).exp()).collect();
    let z: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|v| v / z).collect())
}

/// Runs one attention head whose query rows are all identical, so scores
/// are constant along every row, and returns the largest deviation of the
/// realized weights from [`envelope_row`].
pub fn mask_envelope_check(spec: &MaskSpec, size: usize) -> Result<f64> {
    let width = 2;
    // column 0 is constant, column 1 varies with position
    let x = Tensor::from_rows(&(0..size).map(|i| vec![1.0, 0.3 * i as f64 - 0.7]).collect::<Vec<_>>())?;
    let params = AttentionParams {
        wq: vec![Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]])?],
        wk: vec![Tensor::from_rows(&[vec![0.5, -0.2], vec![1.3, 0.4]])?],
        wv: vec![Tensor::identity(width)],
        wo: Tensor::identity(width),
    };
    let mask = masks::combined_mask(spec, size)?;
    let (_, traces) = attention::wcmha_eval(&x, &params, &mask)?;
    let w = traces[0].weights.data();
    let mut worst = 0.0f64;
    for i in 0..size {
        let expect = envelope_row(spec, size, i)?;
        for j in 0..size {
            let e = if j <= i { expect[j] } else { 0.0 };
            worst = worst.max((w[i * size + j] - e).abs());
        }
    }
    Ok(worst)
}

/// A minimal step plot of one histogram; log bins get a log10 x axis.
pub fn render_svg(h: &Histogram) -> String {
    let (width, height, pad) = (640.0, 360.0, 48.0);
    let xmap = |v: f64| match h.scale {
        BinScale::Log => v.max(WEIGHT_FLOOR).log10(),
        BinScale::Linear => v,
    };
    let (x0, x1) = (xmap(h.edges[0]), xmap(*h.edges.last().expect("edges")));
    let ymax = h.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let sx = |v: f64| pad + (xmap(v) - x0) / (x1 - x0) * (width - 2.0 * pad);
    let sy = |c: f64| height - pad - c / ymax * (height - 2.0 * pad);
    let mut path = format!("M{:.2},{:.2}", sx(h.edges[0]), sy(0.0));
    for (e, c) in h.edges.windows(2).zip(&h.counts) {
        let y = sy(*c as f64);
        path += &format!(" L{:.2},{y:.2} L{:.2},{y:.2}", sx(e[0]), sx(e[1]));
    }
    path += &format!(" L{:.2},{:.2}", sx(*h.edges.last().expect("edges")), sy(0.0));
    let axis = match h.scale {
        BinScale::Log => format!("log10 value [{x0:.0}, {x1:.0}]"),
        BinScale::Linear => format!("value [{x0:.3}, {x1:.3}]"),
    };
    format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n",
            "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n",
            "<line x1=\"{p}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n",
            "<line x1=\"{p}\" y1=\"{p}\" x2=\"{p}\" y2=\"{b}\" stroke=\"black\"/>\n",
            "<path d=\"{path}\" fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\"/>\n",
            "<text x=\"{p}\" y=\"{t}\" font-family=\"sans-serif\" font-size=\"14\">{tag} (n={n}, max bin={m})</text>\n",
            "<text x=\"{p}\" y=\"{xl}\" font-family=\"sans-serif\" font-size=\"12\">{axis}</text>\n",
            "</svg>\n"
        ),
        w = width,
        h = height,
        p = pad,
        b = height - pad,
        r = width - pad,
        t = pad - 16.0,
        xl = height - pad + 28.0,
        path = path,
        tag = h.tag,
        n = h.total,
        m = ymax,
        axis = axis,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub tag: String,
    pub csv: String,
    pub svg: String,
    pub total: u64,
    pub bins: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisManifest {
    pub windows: usize,
    pub histograms: Vec<ManifestEntry>,
    pub modes: Vec<ModeReport>,
    /// Total variation between causal-only and masked weight histograms.
    pub mask_effect_tv: f64,
}

/// Writes one CSV and SVG per histogram plus `manifest.json` into `dir`.
pub fn write_distributions(dir: &Path, dist: &Distributions) -> Result<AnalysisManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for h in &dist.histograms {
        let stem = h.tag.replace('/', "_");
        let (csv, svg) = (format!("{stem}.csv"), format!("{stem}.svg"));
        let csv_path: PathBuf = dir.join(&csv);
        h.write_csv(std::fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?)?;
        let svg_path = dir.join(&svg);
        std::fs::write(&svg_path, render_svg(h)).map_err(|e| Error::io(&svg_path, e))?;
        entries.push(ManifestEntry {
            tag: h.tag.clone(),
            csv,
            svg,
            total: h.total,
            bins: h.bins(),
        });
    }
    let modes = dist
        .histograms
        .iter()
        .filter(|h| h.scale == BinScale::Log)
        .map(bimodality_summary)
        .collect();
    let mask_effect_tv = match (dist.get("causal_weight/all"), dist.get("weight/all")) {
        (Some(a), Some(b)) => total_variation(a, b)?,
        _ => 0.0,
    };
    let manifest = AnalysisManifest {
        windows: dist.windows,
        histograms: entries,
        modes,
        mask_effect_tv,
    };
    let path = dir.join("manifest.json");
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
