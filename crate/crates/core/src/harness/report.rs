//! Summary tables and training-curve plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::config::Mode;
use super::sweep::{MetricsRow, RunKey};
use crate::error::{Error, Result};

/// Mean and sample standard deviation over seeds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub stdev: f64,
    pub n: usize,
}

impl Stat {
    /// `None` for an empty sample. Values are sorted first so that the
    /// result does not depend on their order.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let mean = v.iter().sum::<f64>() / n as f64;
        let stdev = if n > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, stdev, n })
    }
}

impl std::fmt::Display for Stat {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.stdev)
    }
}

/// Total order on fractions for map keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct FractionKey(u64);

impl FractionKey {
    pub fn new(f: f64) -> Self {
        Self(f.to_bits())
    }

    pub fn value(self) -> f64 {
        f64::from_bits(self.0)
    }
}

/// One (mode, fraction) cell aggregated over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryCell {
    pub map_5095: Stat,
    pub map_50: Stat,
    /// Per class; `None` where no seed evaluated the class.
    pub per_class: Vec<Option<Stat>>,
}

pub type Summary = BTreeMap<(Mode, FractionKey), SummaryCell>;

/// Aggregates rows by (mode, fraction). Row order does not matter.
pub fn summarize(rows: &[MetricsRow]) -> Summary {
    let mut groups: BTreeMap<(Mode, FractionKey), Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.mode, FractionKey::new(r.fraction)))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|(k, g)| {
            let pick = |f: fn(&MetricsRow) -> f64| g.iter().map(|r| f(r)).collect::<Vec<_>>();
            let classes = g.iter().map(|r| r.per_class.len()).max().unwrap_or(0);
            let per_class = (0..classes)
                .map(|c| {
                    let v: Vec<f64> = g
                        .iter()
                        .filter_map(|r| r.per_class.get(c).copied().flatten())
                        .collect();
                    Stat::of(&v)
                })
                .collect();
            let cell = SummaryCell {
                map_5095: Stat::of(&pick(|r| r.map_5095)).expect("group is non-empty"),
                map_50: Stat::of(&pick(|r| r.map_50)).expect("group is non-empty"),
                per_class,
            };
            (k, cell)
        })
        .collect()
}

fn percent(f: f64) -> String {
    let p = 100.0 * f;
    if (p - p.round()).abs() < 1e-9 {
        format!("{}%", p.round())
    } else {
        format!("{p}%")
    }
}

fn fractions_of(summary: &Summary) -> Vec<FractionKey> {
    let mut f: Vec<FractionKey> = summary.keys().map(|k| k.1).collect();
    f.sort_by(|a, b| a.value().total_cmp(&b.value()));
    f.dedup();
    f
}

fn modes_of(summary: &Summary) -> Vec<Mode> {
    let mut m: Vec<Mode> = summary.keys().map(|k| k.0).collect();
    m.dedup();
    m
}

/// Markdown table: one row per mode, one column per fraction, cells
/// `mean ± stdev` of the given metric.
pub fn summary_table(summary: &Summary, metric: fn(&SummaryCell) -> Stat) -> String {
    let fractions = fractions_of(summary);
    let mut s = String::from("| Method |");
    for f in &fractions {
        write!(s, " {} |", percent(f.value())).unwrap();
    }
    s.push_str("\n|---|");
    s.push_str(&"---|".repeat(fractions.len()));
    s.push('\n');
    for mode in modes_of(summary) {
        write!(s, "| {} |", mode.label()).unwrap();
        for f in &fractions {
            match summary.get(&(mode, *f)) {
                Some(cell) => write!(s, " {} |", metric(cell)).unwrap(),
                None => s.push_str(" - |"),
            }
        }
        s.push('\n');
    }
    s
}

/// Markdown table with one row per class and one column per
/// (fraction, mode), mean AP over seeds.
pub fn per_class_table(summary: &Summary, class_names: &[String]) -> String {
    let fractions = fractions_of(summary);
    let modes = modes_of(summary);
    let mut s = String::from("| Class |");
    for f in &fractions {
        for m in &modes {
            write!(s, " {} {} |", m.label(), percent(f.value())).unwrap();
        }
    }
    s.push_str("\n|---|");
    s.push_str(&"---|".repeat(fractions.len() * modes.len()));
    s.push('\n');
    for (c, name) in class_names.iter().enumerate() {
        write!(s, "| {name} |").unwrap();
        for f in &fractions {
            for m in &modes {
                let stat = summary
                    .get(&(*m, *f))
                    .and_then(|cell| cell.per_class.get(c).copied().flatten());
                match stat {
                    Some(st) => write!(s, " {:.2} |", st.mean).unwrap(),
                    None => s.push_str(" - |"),
                }
            }
        }
        s.push('\n');
    }
    s
}

/// CSV form of the summary.
pub fn summary_csv(summary: &Summary) -> String {
    let mut s =
        String::from("mode,fraction,runs,map_5095_mean,map_5095_stdev,map_50_mean,map_50_stdev\n");
    for ((mode, f), cell) in summary {
        writeln!(
            s,
            "{mode},{},{},{:.2},{:.2},{:.2},{:.2}",
            f.value(),
            cell.map_5095.n,
            cell.map_5095.mean,
            cell.map_5095.stdev,
            cell.map_50.mean,
            cell.map_50.stdev
        )
        .unwrap();
    }
    s
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes `summary.md`, `summary.csv` and `per_class.md` into `dir` from the
/// test rows of a sweep.
pub fn emit_report(rows: &[MetricsRow], class_names: &[String], dir: &Path) -> Result<Summary> {
    if rows.is_empty() {
        return Err(Error::EmptyData("no metrics rows to report".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let summary = summarize(rows);
    let md = format!(
        "# Test mAP@[0.5:0.95] (mean ± stdev over seeds)\n\n{}\n# Test mAP@0.5\n\n{}",
        summary_table(&summary, |c| c.map_5095),
        summary_table(&summary, |c| c.map_50),
    );
    write(&dir.join("summary.md"), &md)?;
    write(&dir.join("summary.csv"), &summary_csv(&summary))?;
    let pc = format!(
        "# Per-class test AP@[0.5:0.95] (mean over seeds)\n\n{}",
        per_class_table(&summary, class_names)
    );
    write(&dir.join("per_class.md"), &pc)?;
    Ok(summary)
}

/// Self-contained SVG line plot of validation mAP against iteration.
pub fn curve_svg(key: &RunKey, rows: &[MetricsRow]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 300.0;
    const PAD: f64 = 40.0;
    let max_it = rows.iter().map(|r| r.iteration).max().unwrap_or(1).max(1) as f64;
    let x = |it: usize| PAD + (W - 2.0 * PAD) * it as f64 / max_it;
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * v.clamp(0.0, 100.0) / 100.0;
    let line = |f: fn(&MetricsRow) -> f64| {
        rows.iter()
            .map(|r| format!("{:.1},{:.1}", x(r.iteration), y(f(r))))
            .collect::<Vec<_>>()
            .join(" ")
    };
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    );
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    writeln!(
        s,
        "<text x=\"{PAD}\" y=\"20\" font-family=\"sans-serif\" font-size=\"13\">{} {} seed {}</text>",
        key.mode.label(),
        percent(key.fraction),
        key.seed
    )
    .unwrap();
    writeln!(
        s,
        "<path d=\"M{PAD},{PAD} V{} H{}\" stroke=\"black\" fill=\"none\"/>",
        H - PAD,
        W - PAD
    )
    .unwrap();
    for tick in [0.0, 25.0, 50.0, 75.0, 100.0] {
        writeln!(
            s,
            "<text x=\"{}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{tick}</text>",
            PAD - 4.0,
            y(tick) + 3.0
        )
        .unwrap();
    }
    writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"10\" text-anchor=\"end\">{}</text>",
        W - PAD,
        H - PAD + 14.0,
        max_it
    )
    .unwrap();
    for (f, color, label, dy) in [
        (
            (|r: &MetricsRow| r.map_5095) as fn(&MetricsRow) -> f64,
            "#1f77b4",
            "mAP@[.5:.95]",
            0.0,
        ),
        (|r: &MetricsRow| r.map_50, "#d62728", "mAP@.5", 14.0),
    ] {
        writeln!(
            s,
            "<polyline points=\"{}\" stroke=\"{color}\" stroke-width=\"2\" fill=\"none\"/>",
            line(f)
        )
        .unwrap();
        writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{color}\">{label}</text>",
            W - PAD - 90.0,
            PAD + 10.0 + dy
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

pub fn write_curve_svg(path: &Path, key: &RunKey, rows: &[MetricsRow]) -> Result<()> {
    write(path, &curve_svg(key, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(mode: Mode, fraction: f64, seed: u64, map: f64) -> MetricsRow {
        MetricsRow {
            mode,
            fraction,
            seed,
            iteration: 100,
            map_5095: map,
            map_50: map + 10.0,
            per_class: vec![Some(map), None, Some(map / 2.0)],
            seconds: 0.0,
        }
    }

    #[test]
    fn single_row_summary() {
        let s = summarize(&[row(Mode::Semi, 0.1, 0, 42.0)]);
        let cell = &s[&(Mode::Semi, FractionKey::new(0.1))];
        assert_eq!(
            cell.map_5095,
            Stat {
                mean: 42.0,
                stdev: 0.0,
                n: 1
            }
        );
        assert_eq!(cell.per_class[1], None);
    }

    #[test]
    fn three_seed_mean_and_sample_stdev() {
        let rows: Vec<_> = [40.0, 50.0, 60.0]
            .iter()
            .enumerate()
            .map(|(i, &m)| row(Mode::Supervised, 0.05, i as u64, m))
            .collect();
        let s = summarize(&rows);
        let st = s[&(Mode::Supervised, FractionKey::new(0.05))].map_5095;
        assert_eq!(format!("{st}"), "50.00 ± 10.00");
    }

    #[test]
    fn per_class_table_has_one_row_per_class() {
        let names: Vec<String> = ["disc", "ring", "cross"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let s = summarize(&[
            row(Mode::Semi, 0.1, 0, 42.0),
            row(Mode::Supervised, 0.1, 0, 30.0),
        ]);
        let t = per_class_table(&s, &names);
        let body: Vec<&str> = t.lines().skip(2).collect();
        assert_eq!(body.len(), 3);
        assert!(
            body[0].starts_with("| disc | 30.00 | 42.00 |"),
            "{}",
            body[0]
        );
        assert!(body[1].contains(" - |"));
    }

    #[test]
    fn summary_table_layout() {
        let s = summarize(&[
            row(Mode::Supervised, 0.05, 0, 10.0),
            row(Mode::Supervised, 1.0, 0, 20.0),
            row(Mode::Semi, 0.05, 0, 15.0),
        ]);
        let t = summary_table(&s, |c| c.map_5095);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0], "| Method | 5% | 100% |");
        assert_eq!(lines[2], "| Supervised | 10.00 ± 0.00 | 20.00 ± 0.00 |");
        assert_eq!(lines[3], "| Semi-supervised | 15.00 ± 0.00 | - |");
    }

    #[test]
    fn svg_is_self_contained() {
        let key = RunKey {
            mode: Mode::Semi,
            fraction: 0.2,
            seed: 1,
        };
        let rows = vec![
            row(Mode::Semi, 0.2, 1, 10.0),
            MetricsRow {
                iteration: 200,
                ..row(Mode::Semi, 0.2, 1, 30.0)
            },
        ];
        let svg = curve_svg(&key, &rows);
        assert!(svg.starts_with("<svg xmlns=\"http://www.w3.org/2000/svg\""));
        assert!(!svg.contains("href"));
        assert_eq!(svg.matches("<polyline").count(), 2);
    }
}
