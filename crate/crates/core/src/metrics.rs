//! Overlap and surface-distance metrics in voxel units.

use serde::Serialize;

use crate::morphology::{fissure_gt_from_lobes, FissureAdjacency};
use crate::volume::{BinaryMask, LabelVolume, Shape3};
use crate::{Error, Result};

const FAR: i64 = i64::MAX / 4;

/// Foreground voxels with at least one 6-connected background or
/// out-of-volume neighbour, as linear indices in ascending order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SurfaceSet {
    shape: Shape3,
    indices: Vec<usize>,
}

impl SurfaceSet {
    pub fn extract(mask: &BinaryMask) -> Self {
        let shape = mask.shape();
        let [nx, ny, nz] = shape.dims();
        let data = mask.data();
        let mut indices = Vec::new();
        for (i, &inside) in data.iter().enumerate() {
            if !inside {
                continue;
            }
            let (x, y, z) = shape.coords(i);
            let boundary = x == 0
                || y == 0
                || z == 0
                || x + 1 == nx
                || y + 1 == ny
                || z + 1 == nz
                || !data[i - 1]
                || !data[i + 1]
                || !data[i - nx]
                || !data[i + nx]
                || !data[i - nx * ny]
                || !data[i + nx * ny];
            if boundary {
                indices.push(i);
            }
        }
        Self { shape, indices }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn coords(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.indices.iter().map(|&i| self.shape.coords(i))
    }
}

fn check_shapes(pred: &BinaryMask, gt: &BinaryMask) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::param(format!(
            "mask shapes differ: {:?} vs {:?}",
            pred.shape().dims(),
            gt.shape().dims()
        )));
    }
    Ok(())
}

/// `2|P ∩ G| / (|P| + |G|)`, and 1 when both masks are empty.
pub fn dsc(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_shapes(pred, gt)?;
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        inter += usize::from(p && g);
        total += usize::from(p) + usize::from(g);
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Exact squared distance transform along one line (lower envelope of parabolas).
fn edt_line(f: &[i64], out: &mut [i64], sites: &mut Vec<usize>, bounds: &mut Vec<f64>) {
    sites.clear();
    bounds.clear();
    for (q, &fq) in f.iter().enumerate() {
        if fq >= FAR {
            continue;
        }
        let q2 = (q * q) as i64;
        while let Some(&p) = sites.last() {
            let p2 = (p * p) as i64;
            let s = ((fq + q2) - (f[p] + p2)) as f64 / (2 * (q - p)) as f64;
            if s <= *bounds.last().expect("bound per site") {
                sites.pop();
                bounds.pop();
            } else {
                bounds.push(s);
                break;
            }
        }
        if sites.is_empty() {
            bounds.push(f64::NEG_INFINITY);
        }
        sites.push(q);
    }
    if sites.is_empty() {
        out.fill(FAR);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < sites.len() && bounds[k + 1] < q as f64 {
            k += 1;
        }
        let p = sites[k];
        let d = q.abs_diff(p) as i64;
        *o = d * d + f[p];
    }
}

/// Squared Euclidean distance from every voxel to the nearest site.
fn squared_distance_map(shape: Shape3, sites: &[usize]) -> Vec<i64> {
    let mut grid = vec![FAR; shape.len()];
    for &i in sites {
        grid[i] = 0;
    }
    let dims = shape.dims();
    let strides = [1, dims[0], dims[0] * dims[1]];
    let mut line = Vec::new();
    let mut out = Vec::new();
    let mut env_sites = Vec::new();
    let mut bounds = Vec::new();
    for axis in 0..3 {
        let n = dims[axis];
        let stride = strides[axis];
        line.resize(n, 0);
        out.resize(n, 0);
        for start in 0..shape.len() {
            let (x, y, z) = shape.coords(start);
            if [x, y, z][axis] != 0 {
                continue;
            }
            for (k, v) in line.iter_mut().enumerate() {
                *v = grid[start + k * stride];
            }
            edt_line(&line, &mut out, &mut env_sites, &mut bounds);
            for (k, &v) in out.iter().enumerate() {
                grid[start + k * stride] = v;
            }
        }
    }
    grid
}

/// Squared nearest-surface distances from each voxel of `from` (in ascending
/// index order) to the surface `to`.
fn directed_squared(from: &SurfaceSet, to: &SurfaceSet) -> Vec<i64> {
    let map = squared_distance_map(to.shape(), to.indices());
    from.indices().iter().map(|&i| map[i]).collect()
}

fn surfaces(pred: &BinaryMask, gt: &BinaryMask, metric: &str) -> Result<(SurfaceSet, SurfaceSet)> {
    check_shapes(pred, gt)?;
    if pred.is_none() || gt.is_none() {
        return Err(Error::UndefinedMetric(format!(
            "{metric} needs two nonempty masks"
        )));
    }
    Ok((SurfaceSet::extract(pred), SurfaceSet::extract(gt)))
}

/// Nearest-rank 95th percentile of the pooled bidirectional surface distances.
pub fn hd95(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let (sp, sg) = surfaces(pred, gt, "hd95")?;
    let mut pooled = directed_squared(&sp, &sg);
    pooled.extend(directed_squared(&sg, &sp));
    pooled.sort_unstable();
    Ok((pooled[nearest_rank(pooled.len(), 95) - 1] as f64).sqrt())
}

/// Mean of the two directed mean surface distances.
pub fn assd(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let (sp, sg) = surfaces(pred, gt, "assd")?;
    let mean = |d: Vec<i64>| {
        let n = d.len() as f64;
        d.into_iter().map(|v| (v as f64).sqrt()).sum::<f64>() / n
    };
    Ok((mean(directed_squared(&sp, &sg)) + mean(directed_squared(&sg, &sp))) / 2.0)
}

/// One-based rank of the smallest element whose cumulative fraction reaches
/// `percent / 100` in a sorted list of `n` values.
pub fn nearest_rank(n: usize, percent: usize) -> usize {
    (percent * n).div_ceil(100).max(1)
}

pub fn lobe_name(class: u8, num_lobe_classes: usize) -> String {
    const FIVE: [&str; 5] = ["LU", "LL", "RU", "RM", "RL"];
    match class {
        1..=5 if num_lobe_classes == 6 => FIVE[class as usize - 1].to_string(),
        _ => format!("lobe{class}"),
    }
}

pub fn fissure_name(class: u8, adj: &FissureAdjacency) -> String {
    const FIVE: [&str; 4] = ["LOF", "RHF", "ROF-upper", "ROF-lower"];
    match class {
        1..=4 if *adj == FissureAdjacency::five_lobe() => FIVE[class as usize - 1].to_string(),
        _ => format!("fissure{class}"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LobeMetrics {
    pub class: u8,
    pub name: String,
    pub dsc: f64,
    /// `None` when either mask is empty.
    pub hd95: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FissureMetrics {
    pub class: u8,
    pub name: String,
    /// `None` when either fissure band is empty.
    pub assd: Option<f64>,
}

/// Per-class metrics for one case. Undefined distances are kept as `None`
/// (JSON `null`, CSV `undefined`), and any mean over a set containing an
/// undefined entry is itself undefined.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub lobes: Vec<LobeMetrics>,
    pub fissures: Vec<FissureMetrics>,
    pub mean_dsc: f64,
    pub mean_hd95: Option<f64>,
    pub mean_assd: Option<f64>,
}

pub const UNDEFINED: &str = "undefined";

pub const CSV_HEADER: [&str; 7] = ["case", "kind", "class", "name", "dsc", "hd95", "assd"];

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| UNDEFINED.to_string(), |v| v.to_string())
}

fn mean_defined(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v?;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

fn defined<T>(r: Result<T>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

impl MetricsReport {
    /// Rows for one case, lobes first, then fissures, then the means.
    pub fn csv_rows(&self, case: &str) -> Vec<[String; 7]> {
        let mut rows = Vec::new();
        for l in &self.lobes {
            rows.push([
                case.to_string(),
                "lobe".into(),
                l.class.to_string(),
                l.name.clone(),
                l.dsc.to_string(),
                cell(l.hd95),
                String::new(),
            ]);
        }
        for f in &self.fissures {
            rows.push([
                case.to_string(),
                "fissure".into(),
                f.class.to_string(),
                f.name.clone(),
                String::new(),
                String::new(),
                cell(f.assd),
            ]);
        }
        rows.push([
            case.to_string(),
            "mean".into(),
            String::new(),
            "Mean".into(),
            self.mean_dsc.to_string(),
            cell(self.mean_hd95),
            cell(self.mean_assd),
        ]);
        rows
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Numeric(e.to_string()))
    }
}

/// CSV text for several cases with a single header line.
pub fn reports_to_csv<'a>(
    reports: impl IntoIterator<Item = (&'a str, &'a MetricsReport)>,
) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut write = |rec: &[String]| w.write_record(rec).expect("writing to memory");
    write(&CSV_HEADER.map(String::from));
    for (case, r) in reports {
        for row in r.csv_rows(case) {
            write(&row);
        }
    }
    String::from_utf8(w.into_inner().expect("flush to memory")).expect("utf-8 csv")
}

/// Per-lobe DSC and HD95, per-fissure ASSD between the fissure bands derived
/// from each label map.
pub fn evaluate_segmentation(
    pred: &LabelVolume,
    gt: &LabelVolume,
    adj: &FissureAdjacency,
    radius: usize,
) -> Result<MetricsReport> {
    if pred.shape() != gt.shape() {
        return Err(Error::param(format!(
            "label shapes differ: {:?} vs {:?}",
            pred.shape().dims(),
            gt.shape().dims()
        )));
    }
    if pred.num_classes() != gt.num_classes() {
        return Err(Error::param(format!(
            "class counts differ: {} vs {}",
            pred.num_classes(),
            gt.num_classes()
        )));
    }
    let num_classes = gt.num_classes();
    let mut lobes = Vec::new();
    for class in 1..num_classes as u8 {
        let p = pred.mask(class);
        let g = gt.mask(class);
        lobes.push(LobeMetrics {
            class,
            name: lobe_name(class, num_classes),
            dsc: dsc(&p, &g)?,
            hd95: defined(hd95(&p, &g))?,
        });
    }
    let fp = fissure_gt_from_lobes(pred, radius, adj)?;
    let fg = fissure_gt_from_lobes(gt, radius, adj)?;
    let fissures = adj
        .entries()
        .iter()
        .map(|e| {
            Ok(FissureMetrics {
                class: e.fissure,
                name: fissure_name(e.fissure, adj),
                assd: defined(assd(&fp.mask(e.fissure), &fg.mask(e.fissure)))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean_dsc = if lobes.is_empty() {
        1.0
    } else {
        lobes.iter().map(|l| l.dsc).sum::<f64>() / lobes.len() as f64
    };
    Ok(MetricsReport {
        mean_hd95: mean_defined(lobes.iter().map(|l| l.hd95)),
        mean_assd: mean_defined(fissures.iter().map(|f| f.assd)),
        lobes,
        fissures,
        mean_dsc,
    })
}
