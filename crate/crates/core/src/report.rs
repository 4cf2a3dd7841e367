//! Tables and figures from an [`LfeReport`]: CSV rows, a lower-triangular
//! markdown matrix with significance stars, and two SVG bar charts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::codec::write_atomic;
use crate::error::{Error, Result};
use crate::pipeline::{LfeReport, PairResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Format {
    Csv,
    Markdown,
    Svg,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "csv" => Ok(Format::Csv),
            "markdown" | "md" => Ok(Format::Markdown),
            "svg" => Ok(Format::Svg),
            other => Err(Error::InvalidArgument(format!(
                "unknown report format `{other}` (expected csv, markdown or svg)"
            ))),
        }
    }
}

/// Parses a comma-separated format list; an empty string gives no formats.
pub fn parse_formats(list: &str) -> Result<Vec<Format>> {
    let mut out: Vec<Format> = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    out.sort();
    out.dedup();
    Ok(out)
}

pub const ALL_FORMATS: [Format; 3] = [Format::Csv, Format::Markdown, Format::Svg];

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Emitted {
    pub files: Vec<PathBuf>,
    /// Outputs that were skipped and why.
    pub notices: Vec<String>,
}

/// Writes the requested formats into `out_dir`.
pub fn emit_report(report: &LfeReport, formats: &[Format], out_dir: &Path) -> Result<Emitted> {
    let mut out = Emitted::default();
    if formats.is_empty() {
        return Ok(out);
    }
    if report.pairs.is_empty() {
        return Err(Error::InvalidArgument("report has no pairs".into()));
    }
    let mut write = |name: &str, text: String| -> Result<()> {
        let p = out_dir.join(name);
        write_atomic(&p, text.as_bytes())?;
        out.files.push(p);
        Ok(())
    };
    for f in formats {
        match f {
            Format::Csv => write("report.csv", to_csv(report))?,
            Format::Markdown => write("report.md", to_markdown(report))?,
            Format::Svg => {
                write("fig_abx.svg", fig_abx_svg(report))?;
                match fig_family_svg(report) {
                    Some(svg) => write("fig_family.svg", svg)?,
                    None => out.notices.push(format!(
                        "fig_family.svg omitted: {}",
                        report.family_notice.as_deref().unwrap_or("no family contrast")
                    )),
                }
            }
        }
    }
    Ok(out)
}

/// Writes `report.json` and `provenance.json` (hashes, cache keys, version
/// and timestamps).
pub fn write_provenance(report: &LfeReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let rp = out_dir.join("report.json");
    write_atomic(&rp, report.to_json_without_timestamps().as_bytes())?;
    let pp = out_dir.join("provenance.json");
    let text = serde_json::to_string_pretty(&report.provenance).expect("provenance serializes");
    write_atomic(&pp, text.as_bytes())?;
    Ok(vec![rp, pp])
}

fn csv_row(s: &mut String, r: &PairResult) {
    let sc = &r.score;
    writeln!(
        s,
        "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.4},{},{},{},{}",
        sc.language_a,
        sc.language_b,
        r.kind,
        sc.e_aa,
        sc.e_bb,
        sc.e_ab,
        sc.e_ba,
        sc.s_same,
        sc.s_diff,
        sc.lfe_percent,
        r.test.p_value,
        sc.significant,
        sc.stars,
        r.n_triplets
    )
    .unwrap();
}

pub fn to_csv(report: &LfeReport) -> String {
    let mut s = String::from(
        "language_a,language_b,kind,e_aa,e_bb,e_ab,e_ba,s_same,s_diff,lfe_percent,p_value,significant,stars,n_triplets\n",
    );
    for r in report.pairs.iter().chain(&report.accented) {
        csv_row(&mut s, r);
    }
    s
}

/// Lower-triangular matrix: rows are languages 2..n, columns 1..n−1.
pub fn to_markdown(report: &LfeReport) -> String {
    let langs = &report.languages;
    let n = langs.len();
    let mut s = String::from("# LFE scores\n\n");
    if n >= 2 {
        s.push_str("| |");
        for c in &langs[..n - 1] {
            write!(s, " {c} |").unwrap();
        }
        s.push_str("\n|---|");
        s.push_str(&"---:|".repeat(n - 1));
        s.push('\n');
        for (i, row) in langs.iter().enumerate().skip(1) {
            write!(s, "| **{row}** |").unwrap();
            for col in &langs[..n - 1] {
                let j = langs.iter().position(|l| l == col).unwrap();
                if j < i {
                    match report.pair(col, row) {
                        Some(p) => write!(s, " {:.2}{} |", p.score.lfe_percent, p.score.stars).unwrap(),
                        None => s.push_str(" - |"),
                    }
                } else {
                    s.push_str(" |");
                }
            }
            s.push('\n');
        }
    }
    let m = report.pairs.len();
    writeln!(
        s,
        "\nLFE in percent. `*` p ≤ 0.05/{m}, `**` p ≤ 0.005/{m} (Bonferroni over {m} pairs)."
    )
    .unwrap();
    if !report.accented.is_empty() {
        s.push_str("\n## Accented test sets\n\n| test set | other language | native LFE | accented LFE |\n|---|---|---:|---:|\n");
        for r in &report.accented {
            let (a, b) = (&r.score.language_a, &r.score.language_b);
            let native = report
                .pair(a, b)
                .map_or("-".to_string(), |p| format!("{:.2}{}", p.score.lfe_percent, p.score.stars));
            writeln!(s, "| {a} ({b} accent) | {b} | {native} | {:.2}{} |", r.score.lfe_percent, r.score.stars).unwrap();
        }
    }
    if let Some(o) = &report.overall {
        writeln!(
            s,
            "\n## Overall\n\nMean LFE {:.2} ({}), {:.0}% CI [{:.2}, {:.2}] by bootstrap over languages ({} resamples).",
            o.mean_lfe_percent,
            if o.weighted { "triplet-weighted" } else { "unweighted" },
            100.0 * o.ci.level,
            o.ci.lo,
            o.ci.hi,
            o.ci.n_resamples
        )
        .unwrap();
        writeln!(s, "Mean ABX error: familiar {:.4}, unfamiliar {:.4}.", o.mean_same, o.mean_diff).unwrap();
    }
    match (&report.family, &report.family_notice) {
        (Some(f), _) => {
            writeln!(
                s,
                "\n## Language families\n\n| group | mean LFE | SD | N |\n|---|---:|---:|---:|\n| same family | {:.2} | {:.2} | {} |\n| different family | {:.2} | {:.2} | {} |\n",
                f.same_family.mean, f.same_family.sd, f.same_family.n,
                f.different_family.mean, f.different_family.sd, f.different_family.n
            )
            .unwrap();
            writeln!(
                s,
                "Different − same: {:.2}, {:.0}% CI [{:.2}, {:.2}] ({} valid resamples).",
                f.difference.estimate,
                100.0 * f.difference.level,
                f.difference.lo,
                f.difference.hi,
                f.valid_resamples
            )
            .unwrap();
        }
        (None, Some(notice)) => writeln!(s, "\n## Language families\n\n{notice}.").unwrap(),
        (None, None) => {}
    }
    s
}

const BAR_COLORS: [&str; 2] = ["#4c72b0", "#dd8452"];

struct Bars {
    title: String,
    y_label: String,
    series: [&'static str; 2],
    /// (group label, values, error half-widths, marker above the group)
    groups: Vec<(String, Vec<f64>, Vec<f64>, String)>,
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn render(b: &Bars) -> String {
    let n_series = b.series.len();
    let group_w = 24.0 * n_series as f64 + 20.0;
    let (left, top, plot_h) = (60.0, 50.0, 240.0);
    let width = left + 20.0 + group_w * b.groups.len() as f64;
    let height = top + plot_h + 70.0;
    let max = b
        .groups
        .iter()
        .flat_map(|(_, v, e, _)| v.iter().zip(e).map(|(v, e)| v + e))
        .chain(std::iter::once(0.0))
        .fold(f64::MIN, f64::max);
    let min = b
        .groups
        .iter()
        .flat_map(|(_, v, e, _)| v.iter().zip(e).map(|(v, e)| v - e))
        .chain(std::iter::once(0.0))
        .fold(f64::MAX, f64::min);
    let span = if max - min > 0.0 { (max - min) * 1.15 } else { 1.0 };
    let y = |v: f64| top + plot_h * (1.0 - (v - min) / span);
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#
    )
    .unwrap();
    writeln!(s, r#"<text x="{:.1}" y="20" font-size="14" text-anchor="middle">{}</text>"#, width / 2.0, esc(&b.title)).unwrap();
    writeln!(
        s,
        r#"<text x="14" y="{:.1}" transform="rotate(-90 14 {:.1})" text-anchor="middle">{}</text>"#,
        top + plot_h / 2.0,
        top + plot_h / 2.0,
        esc(&b.y_label)
    )
    .unwrap();
    for t in 0..=4 {
        let v = min + span * t as f64 / 4.0;
        writeln!(
            s,
            r##"<line x1="{left}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"##,
            width - 20.0,
            y(v),
            y(v),
            left - 4.0,
            y(v) + 4.0
        )
        .unwrap();
    }
    writeln!(s, r#"<line x1="{left}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="black"/>"#, width - 20.0, y(0.0), y(0.0)).unwrap();
    for (g, (label, vals, errs, marker)) in b.groups.iter().enumerate() {
        let gx = left + 10.0 + g as f64 * group_w;
        let mut top_of_group = f64::MAX;
        for (k, (&v, &e)) in vals.iter().zip(errs).enumerate() {
            let x = gx + 24.0 * k as f64;
            let (y0, y1) = (y(0.0), y(v));
            writeln!(
                s,
                r#"<rect x="{x:.1}" y="{:.1}" width="20" height="{:.1}" fill="{}"><title>{}: {v:.4}</title></rect>"#,
                y0.min(y1),
                (y0 - y1).abs(),
                BAR_COLORS[k % BAR_COLORS.len()],
                esc(b.series[k])
            )
            .unwrap();
            if e > 0.0 {
                writeln!(
                    s,
                    r#"<line x1="{:.1}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="black"/>"#,
                    x + 10.0,
                    x + 10.0,
                    y(v - e),
                    y(v + e)
                )
                .unwrap();
            }
            top_of_group = top_of_group.min(y(v + e)).min(y0);
        }
        if !marker.is_empty() {
            writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle" font-size="14">{}</text>"#,
                gx + 12.0 * n_series as f64 - 2.0,
                top_of_group - 6.0,
                esc(marker)
            )
            .unwrap();
        }
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            gx + 12.0 * n_series as f64 - 2.0,
            top + plot_h + 16.0,
            esc(label)
        )
        .unwrap();
    }
    for (k, name) in b.series.iter().enumerate() {
        let x = left + 10.0 + 120.0 * k as f64;
        let yy = top + plot_h + 40.0;
        writeln!(
            s,
            r#"<rect x="{x:.1}" y="{:.1}" width="12" height="12" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            yy - 10.0,
            BAR_COLORS[k],
            x + 16.0,
            yy,
            esc(name)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Familiar vs unfamiliar ABX error: the mean over native pairs first, then
/// each pair with its star label.
pub fn fig_abx_svg(report: &LfeReport) -> String {
    let mut groups = Vec::new();
    if let Some(o) = &report.overall {
        let marker = if o.ci.lo > 0.0 || o.ci.hi < 0.0 { "*" } else { "" };
        groups.push(("mean".to_string(), vec![o.mean_same, o.mean_diff], vec![0.0, 0.0], marker.to_string()));
    }
    for p in &report.pairs {
        groups.push((
            format!("{}-{}", p.score.language_a, p.score.language_b),
            vec![p.score.s_same, p.score.s_diff],
            vec![0.0, 0.0],
            p.score.stars.clone(),
        ));
    }
    render(&Bars {
        title: "ABX error: familiar vs unfamiliar model".into(),
        y_label: "ABX error".into(),
        series: ["familiar", "unfamiliar"],
        groups,
    })
}

/// Same-family vs different-family mean LFE with SD bars; None without a
/// family contrast.
pub fn fig_family_svg(report: &LfeReport) -> Option<String> {
    let f = report.family.as_ref()?;
    let marker = if f.difference.lo > 0.0 || f.difference.hi < 0.0 { "*" } else { "" };
    Some(render(&Bars {
        title: "LFE by language family".into(),
        y_label: "LFE (%)".into(),
        series: ["same family", "different family"],
        groups: vec![(
            format!("N = {} / {}", f.same_family.n, f.different_family.n),
            vec![f.same_family.mean, f.different_family.mean],
            vec![f.same_family.sd, f.different_family.sd],
            marker.to_string(),
        )],
    }))
}
