//! Figure-ground luminance difference, per-timestep summaries across images
//! and networks, and the CSV tables built from them.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::stimuli::{StimulusClass, StimulusSpec};
use crate::tensor::Tensor;

/// Probe pixels as (column, row). `inside[k]` pairs with `outside[k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FgProbe {
    pub inside: [(usize, usize); 8],
    pub outside: [(usize, usize); 8],
    pub polarity: f32,
}

/// +1 when the figure should read lighter than the ground. Inducer stimuli
/// with dark inducers imply a light illusory figure; a physical square is
/// its own figure, so its sign follows the square's luminance.
pub fn polarity(spec: &StimulusSpec) -> f32 {
    let lighter = match spec.class {
        StimulusClass::Square => spec.inducer > spec.background,
        _ => spec.inducer < spec.background,
    };
    if lighter {
        1.0
    } else {
        -1.0
    }
}

impl FgProbe {
    /// Probes on the axes through the square's center, one and two pixels
    /// either side of each edge midpoint.
    pub fn from_spec(spec: &StimulusSpec, width: usize, height: usize) -> Result<Self> {
        let (x0, y0, s) = (spec.x0 as isize, spec.y0 as isize, spec.size as isize);
        let (cx, cy) = (x0 + s / 2, y0 + s / 2);
        // (column, row) pairs: inside then outside for top, bottom, left, right
        let raw = [
            [(cx, y0), (cx, y0 + 1), (cx, y0 - 1), (cx, y0 - 2)],
            [(cx, y0 + s - 1), (cx, y0 + s - 2), (cx, y0 + s), (cx, y0 + s + 1)],
            [(x0, cy), (x0 + 1, cy), (x0 - 1, cy), (x0 - 2, cy)],
            [(x0 + s - 1, cy), (x0 + s - 2, cy), (x0 + s, cy), (x0 + s + 1, cy)],
        ];
        let check = |(c, r): (isize, isize)| -> Result<(usize, usize)> {
            if c < 0 || r < 0 || c as usize >= width || r as usize >= height {
                Err(Error::Input(format!("FG probe ({c}, {r}) falls outside the {width}x{height} frame")))
            } else {
                Ok((c as usize, r as usize))
            }
        };
        let mut inside = [(0, 0); 8];
        let mut outside = [(0, 0); 8];
        for (axis, pts) in raw.iter().enumerate() {
            for k in 0..2 {
                inside[2 * axis + k] = check(pts[k])?;
                outside[2 * axis + k] = check(pts[2 + k])?;
            }
        }
        Ok(Self {
            inside,
            outside,
            polarity: polarity(spec),
        })
    }

    /// FG on a (C, H, W) plane set stored row-major in `data`.
    pub fn measure(&self, data: &[f32], channels: usize, width: usize, height: usize) -> f32 {
        let plane = width * height;
        let lum = |(c, r): (usize, usize)| -> f64 {
            (0..channels).map(|ch| data[ch * plane + r * width + c] as f64).sum::<f64>() / channels as f64
        };
        let diff: f64 = self.inside.iter().zip(&self.outside).map(|(&i, &o)| lum(i) - lum(o)).sum::<f64>() / 8.0;
        (self.polarity as f64 * diff) as f32
    }
}

/// FG of one image of shape (C, H, W) or (1, C, H, W).
pub fn fg_value(image: &Tensor, spec: &StimulusSpec) -> Result<f32> {
    let (c, h, w) = match image.shape() {
        &[c, h, w] | &[1, c, h, w] => (c, h, w),
        other => {
            return Err(Error::Rank {
                op: "fg_value",
                expected: 3,
                actual: other.to_vec(),
            })
        }
    };
    let probe = FgProbe::from_spec(spec, w, h)?;
    Ok(probe.measure(image.data(), c, w, h))
}

/// One measurement of one image at one timestep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub network_id: String,
    pub class: StimulusClass,
    pub noise_sigma: f32,
    pub timestep: usize,
    pub p_square: Option<f32>,
    pub fg: Option<f32>,
    pub reconstruction: Option<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    PSquare,
    Fg,
    Reconstruction,
}

impl Metric {
    fn index(self) -> usize {
        match self {
            Metric::PSquare => 0,
            Metric::Fg => 1,
            Metric::Reconstruction => 2,
        }
    }

    fn of(self, r: &RunRecord) -> Option<f32> {
        match self {
            Metric::PSquare => r.p_square,
            Metric::Fg => r.fg,
            Metric::Reconstruction => r.reconstruction,
        }
    }

    /// CSV column prefix.
    pub fn column(self) -> &'static str {
        match self {
            Metric::PSquare => "p_square",
            Metric::Fg => "fg",
            Metric::Reconstruction => "reconstruction",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grouping {
    /// One row per network; mean and SEM over that network's images.
    PerNetwork,
    /// Network means averaged; SEM across networks. `network_id` is "all".
    AcrossNetworks,
}

/// Label used for rows that pool networks.
pub const ALL_NETWORKS: &str = "all";

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub network_id: String,
    pub class: StimulusClass,
    pub noise_sigma: f32,
    pub timestep: usize,
    /// `None` marks an empty group.
    pub mean: Option<f64>,
    /// `None` when fewer than two values exist.
    pub sem: Option<f64>,
    pub n: usize,
}

#[derive(Clone, Copy, Debug, Default)]
struct Running {
    n: usize,
    mean: f64,
    m2: f64,
}

impl Running {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    fn summary(&self) -> (Option<f64>, Option<f64>) {
        match self.n {
            0 => (None, None),
            1 => (Some(self.mean), None),
            n => (Some(self.mean), Some((self.m2 / (n - 1) as f64).sqrt() / (n as f64).sqrt())),
        }
    }
}

type Key = (StimulusClass, u32, usize);

/// Streaming accumulator for [`RunRecord`]s.
#[derive(Clone, Debug, Default)]
pub struct Aggregator {
    groups: BTreeMap<(String, Key), [Running; 3]>,
}

fn key(class: StimulusClass, noise: f32, t: usize) -> Key {
    (class, noise.to_bits(), t)
}

impl Aggregator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: &RunRecord) {
        let slot = self
            .groups
            .entry((record.network_id.clone(), key(record.class, record.noise_sigma, record.timestep)))
            .or_default();
        for m in [Metric::PSquare, Metric::Fg, Metric::Reconstruction] {
            if let Some(v) = m.of(record) {
                slot[m.index()].push(v as f64);
            }
        }
    }

    pub fn extend<'a>(&mut self, records: impl IntoIterator<Item = &'a RunRecord>) {
        for r in records {
            self.push(r);
        }
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn networks(&self) -> BTreeSet<String> {
        self.groups.keys().map(|(n, _)| n.clone()).collect()
    }

    fn per_network(&self, metric: Metric) -> Vec<SummaryRow> {
        self.groups
            .iter()
            .map(|((net, (class, bits, t)), stats)| {
                let s = stats[metric.index()];
                let (mean, sem) = s.summary();
                SummaryRow {
                    network_id: net.clone(),
                    class: *class,
                    noise_sigma: f32::from_bits(*bits),
                    timestep: *t,
                    mean,
                    sem,
                    n: s.n,
                }
            })
            .collect()
    }

    fn across_networks(&self, metric: Metric) -> Vec<SummaryRow> {
        let mut pooled: BTreeMap<Key, Running> = BTreeMap::new();
        for ((_, k), stats) in &self.groups {
            let entry = pooled.entry(*k).or_default();
            if let (Some(m), _) = stats[metric.index()].summary() {
                entry.push(m);
            }
        }
        pooled
            .into_iter()
            .map(|((class, bits, t), s)| {
                let (mean, sem) = s.summary();
                SummaryRow {
                    network_id: ALL_NETWORKS.into(),
                    class,
                    noise_sigma: f32::from_bits(bits),
                    timestep: t,
                    mean,
                    sem,
                    n: s.n,
                }
            })
            .collect()
    }

    /// Rows for every group that received at least one record.
    pub fn summarize(&self, metric: Metric, grouping: Grouping) -> Vec<SummaryRow> {
        match grouping {
            Grouping::PerNetwork => self.per_network(metric),
            Grouping::AcrossNetworks => self.across_networks(metric),
        }
    }

    /// Like [`Aggregator::summarize`] but with a row for every combination of
    /// network (or "all"), class, noise level and timestep; missing groups get
    /// the empty marker.
    pub fn dense(
        &self,
        metric: Metric,
        grouping: Grouping,
        classes: &[StimulusClass],
        noise_levels: &[f32],
        timesteps: std::ops::RangeInclusive<usize>,
    ) -> Vec<SummaryRow> {
        let rows = self.summarize(metric, grouping);
        let mut index: BTreeMap<(String, Key), SummaryRow> = rows
            .into_iter()
            .map(|r| ((r.network_id.clone(), key(r.class, r.noise_sigma, r.timestep)), r))
            .collect();
        let nets: Vec<String> = match grouping {
            Grouping::PerNetwork => self.networks().into_iter().collect(),
            Grouping::AcrossNetworks => vec![ALL_NETWORKS.into()],
        };
        let mut out = Vec::new();
        for net in &nets {
            for &class in classes {
                for &noise in noise_levels {
                    for t in timesteps.clone() {
                        let row = index.remove(&(net.clone(), key(class, noise, t))).unwrap_or(SummaryRow {
                            network_id: net.clone(),
                            class,
                            noise_sigma: noise,
                            timestep: t,
                            mean: None,
                            sem: None,
                            n: 0,
                        });
                        out.push(row);
                    }
                }
            }
        }
        out
    }

    /// Mean of `metric` for one network (or pooled) at one cell.
    pub fn mean(&self, metric: Metric, network: Option<&str>, class: StimulusClass, noise: f32, t: usize) -> Option<f64> {
        let grouping = if network.is_some() {
            Grouping::PerNetwork
        } else {
            Grouping::AcrossNetworks
        };
        let want = network.unwrap_or(ALL_NETWORKS);
        self.summarize(metric, grouping)
            .into_iter()
            .find(|r| r.network_id == want && r.class == class && r.noise_sigma == noise && r.timestep == t)
            .and_then(|r| r.mean)
    }
}

/// Per-group mean and SEM of one metric.
pub fn aggregate<'a>(records: impl IntoIterator<Item = &'a RunRecord>, metric: Metric, grouping: Grouping) -> Vec<SummaryRow> {
    let mut agg = Aggregator::new();
    agg.extend(records);
    agg.summarize(metric, grouping)
}

/// Pooled P(square) for every class × noise × timestep seen in the records.
pub fn decision_curves<'a>(records: impl IntoIterator<Item = &'a RunRecord>) -> Vec<SummaryRow> {
    let mut agg = Aggregator::new();
    let mut noises = BTreeSet::new();
    let mut t_max = 0;
    for r in records {
        agg.push(r);
        noises.insert(r.noise_sigma.to_bits());
        t_max = t_max.max(r.timestep);
    }
    if t_max == 0 {
        return Vec::new();
    }
    let noises: Vec<f32> = noises.into_iter().map(f32::from_bits).collect();
    agg.dense(Metric::PSquare, Grouping::AcrossNetworks, &StimulusClass::ALL, &noises, 1..=t_max)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes rows under the header
/// `network_id,class,noise_sigma,timestep,<metric>_mean,<metric>_sem`,
/// plus an `ablation` column when `tag` is given. Empty groups and undefined
/// SEMs are written as empty fields.
pub fn write_summary_csv(path: &Path, metric: Metric, rows: &[SummaryRow], tag: Option<&str>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mean_col = format!("{}_mean", metric.column());
    let sem_col = format!("{}_sem", metric.column());
    let mut header = vec!["network_id", "class", "noise_sigma", "timestep", mean_col.as_str(), sem_col.as_str()];
    if tag.is_some() {
        header.push("ablation");
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.network_id.clone(),
            r.class.label().to_string(),
            r.noise_sigma.to_string(),
            r.timestep.to_string(),
            fmt_opt(r.mean),
            fmt_opt(r.sem),
        ];
        if let Some(t) = tag {
            rec.push(t.to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Paired comparison of two per-network quantities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairedDifference {
    pub mean: f64,
    /// Half-width of the two-sided 95% t interval; infinite below two pairs.
    pub half_width: f64,
}

impl PairedDifference {
    /// Whether the 95% interval contains zero.
    pub fn indistinguishable(&self) -> bool {
        self.mean.abs() <= self.half_width
    }
}

pub fn paired_difference(a: &[f64], b: &[f64]) -> Result<PairedDifference> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Input(format!("paired samples of lengths {} and {}", a.len(), b.len())));
    }
    let mut s = Running::default();
    for (x, y) in a.iter().zip(b) {
        s.push(x - y);
    }
    let half_width = match s.summary() {
        (_, Some(sem)) => {
            let t = StudentsT::new(0.0, 1.0, (s.n - 1) as f64)
                .map_err(|e| Error::Input(e.to_string()))?
                .inverse_cdf(0.975);
            t * sem
        }
        _ => f64::INFINITY,
    };
    Ok(PairedDifference { mean: s.mean, half_width })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stimuli::{render, sample_spec, SamplingRanges, IMAGE_SIZE};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(class: StimulusClass, seed: u64) -> StimulusSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample_spec(class, &SamplingRanges::default(), &mut rng)
    }

    #[test]
    fn uniform_and_clean_all_in_give_zero() {
        for seed in 0..50 {
            let s = spec(StimulusClass::AllIn, seed);
            assert_eq!(fg_value(&Tensor::full(&[3, 32, 32], 0.3), &s).unwrap(), 0.0);
            assert_eq!(fg_value(&render(&s).unwrap().pixels, &s).unwrap(), 0.0);
        }
    }

    #[test]
    fn physical_square_gives_its_contrast() {
        for seed in 0..50 {
            let s = spec(StimulusClass::Square, seed);
            let fg = fg_value(&render(&s).unwrap().pixels, &s).unwrap();
            assert!((fg - s.contrast()).abs() < 1e-6, "{fg} vs {}", s.contrast());
        }
    }

    #[test]
    fn polarity_follows_inducer_darkness() {
        let mut s = spec(StimulusClass::AllIn, 1);
        s.inducer = 0.1;
        s.background = 0.9;
        assert_eq!(polarity(&s), 1.0);
        s.class = StimulusClass::Square;
        s.orientations = None;
        assert_eq!(polarity(&s), -1.0);
    }

    #[test]
    fn probes_avoid_inducers_and_straddle_the_edges() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for i in 0..2000 {
            let s = sample_spec(StimulusClass::ALL[i % 4], &SamplingRanges::default(), &mut rng);
            let p = FgProbe::from_spec(&s, IMAGE_SIZE, IMAGE_SIZE).unwrap();
            let r = s.radius();
            let (x0, y0, sz) = (s.x0 as f64, s.y0 as f64, s.size as f64);
            for (pts, want_inside) in [(&p.inside, true), (&p.outside, false)] {
                for &(c, row) in pts.iter() {
                    let (px, py) = (c as f64 + 0.5, row as f64 + 0.5);
                    let inside = px > x0 && px < x0 + sz && py > y0 && py < y0 + sz;
                    assert_eq!(inside, want_inside);
                    for (cx, cy) in s.corners() {
                        assert!(((px - cx).powi(2) + (py - cy).powi(2)).sqrt() > r);
                    }
                }
            }
        }
    }

    #[test]
    fn probes_off_frame_are_an_error() {
        let mut s = spec(StimulusClass::AllIn, 2);
        s.y0 = 1;
        assert!(FgProbe::from_spec(&s, 32, 32).is_err());
    }

    proptest! {
        #[test]
        fn shift_and_inversion_properties(seed in 0u64..1000, levels in proptest::collection::vec(0u32..=128, 1024), shift in 0u32..=64) {
            let s = spec(StimulusClass::ALL[(seed % 4) as usize], seed);
            // dyadic values keep every sum exact
            let plane: Vec<f32> = levels.iter().map(|&k| k as f32 / 256.0).collect();
            let img = Tensor::from_fn(&[3, 32, 32], |i| plane[i % 1024]);
            let fg = fg_value(&img, &s).unwrap();
            let c = shift as f32 / 256.0;
            prop_assert_eq!(fg_value(&img.map(|v| v + c), &s).unwrap(), fg);
            prop_assert_eq!(fg_value(&img.map(|v| 1.0 - v), &s).unwrap(), -fg);
        }
    }

    fn rec(net: &str, t: usize, p: f32) -> RunRecord {
        RunRecord {
            network_id: net.into(),
            class: StimulusClass::AllIn,
            noise_sigma: 0.1,
            timestep: t,
            p_square: Some(p),
            fg: None,
            reconstruction: None,
        }
    }

    #[test]
    fn three_network_toy_case() {
        // network means 0.2, 0.4, 0.9 -> mean 0.5, sample sd sqrt(0.13), sem sqrt(0.13/3)
        let records = vec![
            rec("a", 1, 0.1),
            rec("a", 1, 0.3),
            rec("b", 1, 0.4),
            rec("c", 1, 0.8),
            rec("c", 1, 1.0),
        ];
        let rows = aggregate(&records, Metric::PSquare, Grouping::AcrossNetworks);
        assert_eq!(rows.len(), 1);
        assert!((rows[0].mean.unwrap() - 0.5).abs() < 1e-7);
        assert!((rows[0].sem.unwrap() - (0.13f64 / 3.0).sqrt()).abs() < 1e-7);
        assert_eq!(rows[0].n, 3);
        let per = aggregate(&records, Metric::PSquare, Grouping::PerNetwork);
        assert_eq!(per.len(), 3);
        assert!(per[1].sem.is_none());
        assert!((per[0].sem.unwrap() - 0.1).abs() < 1e-7);
    }

    #[test]
    fn single_network_sem_is_flagged_and_identical_networks_give_zero() {
        let one = aggregate(&[rec("a", 1, 0.4)], Metric::PSquare, Grouping::AcrossNetworks);
        assert!(one[0].sem.is_none());
        let same = aggregate(&[rec("a", 1, 0.4), rec("b", 1, 0.4)], Metric::PSquare, Grouping::AcrossNetworks);
        assert_eq!(same[0].sem, Some(0.0));
    }

    #[test]
    fn missing_metric_is_an_empty_marker() {
        let rows = aggregate(&[rec("a", 1, 0.4)], Metric::Fg, Grouping::AcrossNetworks);
        assert_eq!(rows[0].mean, None);
        assert_eq!(rows[0].n, 0);
    }

    #[test]
    fn decision_curves_are_dense() {
        let rows = decision_curves(&[rec("a", 1, 0.1), rec("a", 3, 0.2)]);
        assert_eq!(rows.len(), 4 * 3);
        assert!(rows.iter().filter(|r| r.mean.is_some()).count() == 2);
    }

    #[test]
    fn csv_header_and_empty_fields() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("decisions.csv");
        let rows = decision_curves(&[rec("a", 1, 0.25)]);
        write_summary_csv(&path, Metric::PSquare, &rows, None).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "network_id,class,noise_sigma,timestep,p_square_mean,p_square_sem");
        assert!(text.contains("all,AllIn,0.1,1,0.25,\n"));
        assert!(text.contains("all,Square,0.1,1,,\n"));
        write_summary_csv(&path, Metric::Fg, &rows, Some("lambda0")).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("network_id,class,noise_sigma,timestep,fg_mean,fg_sem,ablation\n"));
    }

    #[test]
    fn paired_interval() {
        let d = paired_difference(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!(d.indistinguishable());
        let d = paired_difference(&[1.0, 1.1, 0.9], &[0.0, 0.0, 0.0]).unwrap();
        // t(0.975, 2) = 4.302653
        assert!((d.half_width - 4.302653 * 0.1 / 3f64.sqrt()).abs() < 1e-5);
        assert!(!d.indistinguishable());
        assert!(paired_difference(&[1.0], &[0.0]).unwrap().half_width.is_infinite());
    }
}
