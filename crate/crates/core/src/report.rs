//! Group mean profiles, a 2-D PCA view, and the CSV/SVG report bundle.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::awareness::csv_err;
use crate::binio::write_file;
use crate::error::{KamirError, Result};
use crate::fmt::{fixed, sig9};
use crate::sft::{dynamics_csv, summary_csv, DynamicsRecord, GroupSummary};

/// An awareness vector tagged with the group it is reported under.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedVector {
    pub doc_id: String,
    pub group: String,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupProfile {
    pub group: String,
    pub mean: Vec<f64>,
    /// Population standard deviation.
    pub std: Vec<f64>,
    pub count: usize,
}

fn check_lengths(vectors: &[GroupedVector]) -> Result<usize> {
    let k = vectors
        .first()
        .ok_or_else(|| KamirError::invalid("no vectors"))?
        .values
        .len();
    if k == 0 {
        return Err(KamirError::invalid("vectors are empty"));
    }
    if let Some(v) = vectors.iter().find(|v| v.values.len() != k) {
        return Err(KamirError::Shape(format!(
            "vector {:?} has length {}, expected {k}",
            v.doc_id,
            v.values.len()
        )));
    }
    Ok(k)
}

/// Per-group elementwise mean and population standard deviation, groups
/// sorted by name.
pub fn group_profiles(vectors: &[GroupedVector]) -> Result<Vec<GroupProfile>> {
    let k = check_lengths(vectors)?;
    let mut groups: BTreeMap<&str, Vec<&[f32]>> = BTreeMap::new();
    for v in vectors {
        groups.entry(&v.group).or_default().push(&v.values);
    }
    Ok(groups
        .into_iter()
        .map(|(name, members)| {
            let n = members.len() as f64;
            let mut mean = vec![0.0f64; k];
            for m in &members {
                for (a, &x) in mean.iter_mut().zip(m.iter()) {
                    *a += x as f64;
                }
            }
            mean.iter_mut().for_each(|a| *a /= n);
            let mut var = vec![0.0f64; k];
            for m in &members {
                for ((s, &x), mu) in var.iter_mut().zip(m.iter()).zip(&mean) {
                    *s += (x as f64 - mu).powi(2);
                }
            }
            GroupProfile {
                group: name.to_string(),
                mean,
                std: var.into_iter().map(|s| (s / n).sqrt()).collect(),
                count: members.len(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub doc_id: String,
    pub group: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection2D {
    pub points: Vec<ProjectedPoint>,
    pub mean: Vec<f64>,
    /// Unit-length principal axes, largest variance first.
    pub components: [Vec<f64>; 2],
    pub explained_variance_ratio: [f64; 2],
}

/// Mean-centered PCA onto the top two eigenvectors of the covariance. Each
/// axis is oriented so its first nonzero loading is positive.
pub fn project_2d(vectors: &[GroupedVector]) -> Result<Projection2D> {
    if vectors.len() < 3 {
        return Err(KamirError::invalid(format!(
            "projection needs at least 3 vectors, got {}",
            vectors.len()
        )));
    }
    let k = check_lengths(vectors)?;
    let n = vectors.len();
    let data = DMatrix::from_fn(n, k, |i, j| vectors[i].values[j] as f64);
    let mean: Vec<f64> = (0..k).map(|j| data.column(j).mean()).collect();
    let mut centered = data;
    for j in 0..k {
        let mu = mean[j];
        centered.column_mut(j).iter_mut().for_each(|v| *v -= mu);
    }
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let axis = |rank: usize| -> (Vec<f64>, f64) {
        let Some(&c) = order.get(rank) else {
            return (vec![0.0; k], 0.0);
        };
        let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
        }
        let ratio = if total > 0.0 {
            (eig.eigenvalues[c].max(0.0) / total).clamp(0.0, 1.0)
        } else {
            0.0
        };
        (v, ratio)
    };
    let (c1, r1) = axis(0);
    let (c2, r2) = axis(1);
    let points = vectors
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let row = centered.row(i);
            ProjectedPoint {
                doc_id: v.doc_id.clone(),
                group: v.group.clone(),
                x: row.iter().zip(&c1).map(|(a, b)| a * b).sum(),
                y: row.iter().zip(&c2).map(|(a, b)| a * b).sum(),
            }
        })
        .collect();
    Ok(Projection2D {
        points,
        mean,
        components: [c1, c2],
        explained_variance_ratio: [r1, r2],
    })
}

fn csv_bytes(header: &[&str], rows: Vec<Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    w.into_inner()
        .map_err(|e| KamirError::invalid(format!("csv: {e}")))
}

/// `group,layer_index,mean,std,count`; layer indices start at 1.
pub fn profiles_csv(profiles: &[GroupProfile]) -> Result<Vec<u8>> {
    let mut rows = Vec::new();
    for p in profiles {
        for (i, (m, s)) in p.mean.iter().zip(&p.std).enumerate() {
            rows.push(vec![
                p.group.clone(),
                (i + 1).to_string(),
                sig9(*m),
                sig9(*s),
                p.count.to_string(),
            ]);
        }
    }
    csv_bytes(&["group", "layer_index", "mean", "std", "count"], rows)
}

/// `doc_id,group,x,y`.
pub fn projection_csv(projection: &Projection2D) -> Result<Vec<u8>> {
    let rows = projection
        .points
        .iter()
        .map(|p| vec![p.doc_id.clone(), p.group.clone(), sig9(p.x), sig9(p.y)])
        .collect();
    csv_bytes(&["doc_id", "group", "x", "y"], rows)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: f64 = 56.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn new(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Frame {
        let span = |it: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = it.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                let pad = 0.05 * (hi - lo);
                (lo - pad, hi + pad)
            }
        };
        let (x0, x1) = span(&mut xs.clone());
        let (y0, y1) = span(&mut ys.clone());
        Frame { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * MARGIN)
    }
}

fn svg_open(title: &str, frame: &Frame, xlabel: &str, ylabel: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">"
    );
    let _ = writeln!(s, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(s, "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">{}</text>", W / 2.0, escape(title));
    let (l, r, t, b) = (MARGIN, W - MARGIN, MARGIN, H - MARGIN);
    let _ = writeln!(s, "<rect x=\"{l}\" y=\"{t}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#444\"/>", r - l, b - t);
    for (v, label) in [(frame.x0, frame.x0), (frame.x1, frame.x1)] {
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>", fixed(frame.px(v), 2), b + 16.0, fixed(label, 3));
    }
    for v in [frame.y0, frame.y1] {
        let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>", l - 6.0, fixed(frame.py(v) + 4.0, 2), fixed(v, 3));
    }
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>", W / 2.0, H - 14.0, escape(xlabel));
    let _ = writeln!(
        s,
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>",
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    );
    s
}

fn legend(s: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = MARGIN + 14.0 + 16.0 * i as f64;
        let x = W - MARGIN - 110.0;
        let _ = writeln!(s, "<rect x=\"{x}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{}\"/>", y - 9.0, PALETTE[i % PALETTE.len()]);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{y}\">{}</text>", x + 16.0, escape(name));
    }
}

/// Layer index against mean similarity, one polyline per group.
pub fn profiles_svg(profiles: &[GroupProfile]) -> String {
    let k = profiles.iter().map(|p| p.mean.len()).max().unwrap_or(1);
    let frame = Frame::new(
        [1.0, k as f64].into_iter(),
        profiles.iter().flat_map(|p| p.mean.iter().copied()),
    );
    let mut s = svg_open("Mean awareness profile", &frame, "layer index", "mean cosine similarity");
    for (i, p) in profiles.iter().enumerate() {
        let pts: Vec<String> = p
            .mean
            .iter()
            .enumerate()
            .map(|(j, &m)| format!("{},{}", fixed(frame.px((j + 1) as f64), 2), fixed(frame.py(m), 2)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"2\" points=\"{}\"/>",
            PALETTE[i % PALETTE.len()],
            pts.join(" ")
        );
    }
    let names: Vec<&str> = profiles.iter().map(|p| p.group.as_str()).collect();
    legend(&mut s, &names);
    s.push_str("</svg>\n");
    s
}

/// Scatter of the 2-D projection colored by group.
pub fn projection_svg(projection: &Projection2D) -> String {
    let frame = Frame::new(
        projection.points.iter().map(|p| p.x),
        projection.points.iter().map(|p| p.y),
    );
    let [r1, r2] = projection.explained_variance_ratio;
    let mut s = svg_open(
        "Awareness vectors, PCA projection",
        &frame,
        &format!("PC1 ({}%)", fixed(100.0 * r1, 1)),
        &format!("PC2 ({}%)", fixed(100.0 * r2, 1)),
    );
    let mut names: Vec<&str> = projection.points.iter().map(|p| p.group.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    for p in &projection.points {
        let c = names.iter().position(|n| *n == p.group).unwrap_or(0);
        let _ = writeln!(
            s,
            "<circle cx=\"{}\" cy=\"{}\" r=\"3\" fill=\"{}\" fill-opacity=\"0.75\"/>",
            fixed(frame.px(p.x), 2),
            fixed(frame.py(p.y), 2),
            PALETTE[c % PALETTE.len()]
        );
    }
    legend(&mut s, &names);
    s.push_str("</svg>\n");
    s
}

/// Plain-text summary: profile comparison, projection quality, and the
/// dynamics table when present.
pub fn summary_text(
    profiles: &[GroupProfile],
    projection: Option<&Projection2D>,
    dynamics: Option<&[GroupSummary]>,
) -> String {
    let mut s = String::from("# Awareness report\n\n## Group profiles\n\n");
    for p in profiles {
        let overall = p.mean.iter().sum::<f64>() / p.mean.len().max(1) as f64;
        let _ = writeln!(s, "- {}: {} documents, mean similarity over layers {}", p.group, p.count, fixed(overall, 4));
    }
    let find = |name: &str| profiles.iter().find(|p| p.group == name);
    if let (Some(f), Some(u)) = (find("familiar"), find("unfamiliar")) {
        let gap: Vec<f64> = f.mean.iter().zip(&u.mean).map(|(a, b)| a - b).collect();
        let (idx, max_gap) = gap
            .iter()
            .enumerate()
            .fold((0, 0.0f64), |acc, (i, &g)| if g.abs() > acc.1.abs() { (i, g) } else { acc });
        let _ = writeln!(
            s,
            "- largest familiar minus unfamiliar gap: {} at layer {}",
            fixed(max_gap, 4),
            idx + 1
        );
    }
    if let Some(p) = projection {
        let _ = writeln!(
            s,
            "\n## Projection\n\nPC1 explains {}% and PC2 {}% of the variance.",
            fixed(100.0 * p.explained_variance_ratio[0], 2),
            fixed(100.0 * p.explained_variance_ratio[1], 2)
        );
    }
    if let Some(d) = dynamics.filter(|d| !d.is_empty()) {
        s.push_str("\n## Fine-tuning dynamics\n\n| group | loss | entropy | grad norm |\n|---|---|---|---|\n");
        for g in d {
            let _ = writeln!(
                s,
                "| {} | {} | {} | {} |",
                g.group,
                fixed(g.mean_loss, 4),
                fixed(g.mean_entropy, 4),
                fixed(g.mean_grad_norm, 4)
            );
        }
        let get = |name: &str| d.iter().find(|g| g.group.name() == name);
        if let (Some(f), Some(u)) = (get("familiar"), get("unfamiliar")) {
            let cmp = |a: f64, b: f64| if a > b { "higher" } else if a < b { "lower" } else { "equal" };
            let _ = writeln!(
                s,
                "\nDirectional findings (unfamiliar relative to familiar): loss {}, entropy {}, gradient norm {}.",
                cmp(u.mean_loss, f.mean_loss),
                cmp(u.mean_entropy, f.mean_entropy),
                cmp(u.mean_grad_norm, f.mean_grad_norm)
            );
        }
    }
    s
}

/// Writes the CSV, SVG and summary files into `dir`. Dynamics outputs are
/// written only when provided.
pub fn render_report(
    dir: &Path,
    profiles: &[GroupProfile],
    projection: Option<&Projection2D>,
    dynamics: Option<&[GroupSummary]>,
    records: Option<&[DynamicsRecord]>,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| KamirError::io(dir, e))?;
    write_file(&dir.join("profiles.csv"), &profiles_csv(profiles)?)?;
    write_file(&dir.join("profiles.svg"), profiles_svg(profiles).as_bytes())?;
    if let Some(p) = projection {
        write_file(&dir.join("projection.csv"), &projection_csv(p)?)?;
        write_file(&dir.join("projection.svg"), projection_svg(p).as_bytes())?;
    }
    if let Some(d) = dynamics.filter(|d| !d.is_empty()) {
        write_file(&dir.join("dynamics_summary.csv"), &summary_csv(d)?)?;
    }
    if let Some(r) = records.filter(|r| !r.is_empty()) {
        write_file(&dir.join("dynamics.csv"), &dynamics_csv(r)?)?;
    }
    write_file(&dir.join("report.md"), summary_text(profiles, projection, dynamics).as_bytes())
}
