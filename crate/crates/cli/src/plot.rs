//! Static SVG of the training curves: losses on the left, mAP on the right.

use std::fmt::Write as _;

use mvhash::train::EpochRecord;

const PANEL_W: f64 = 360.0;
const PANEL_H: f64 = 240.0;
const PAD: f64 = 40.0;

struct Series<'a> {
    name: &'a str,
    colour: &'a str,
    points: Vec<(f64, f64)>,
}

fn panel(out: &mut String, x0: f64, title: &str, series: &[Series]) {
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in &all {
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        ymin = ymin.min(y);
        ymax = ymax.max(y);
    }
    if all.is_empty() {
        (xmin, xmax, ymin, ymax) = (0.0, 1.0, 0.0, 1.0);
    }
    if xmax <= xmin {
        xmax = xmin + 1.0;
    }
    if ymax <= ymin {
        ymax = ymin + 1.0;
    }
    let sx = |x: f64| x0 + PAD + (x - xmin) / (xmax - xmin) * (PANEL_W - 2.0 * PAD);
    let sy = |y: f64| PANEL_H - PAD - (y - ymin) / (ymax - ymin) * (PANEL_H - 2.0 * PAD);

    writeln!(
        out,
        r##"<rect x="{}" y="{PAD}" width="{}" height="{}" fill="none" stroke="#999"/>"##,
        x0 + PAD,
        PANEL_W - 2.0 * PAD,
        PANEL_H - 2.0 * PAD
    )
    .unwrap();
    writeln!(out, r##"<text x="{}" y="24" font-size="14">{title}</text>"##, x0 + PAD).unwrap();
    for (y, anchor) in [(ymin, PANEL_H - PAD), (ymax, PAD + 10.0)] {
        writeln!(out, r##"<text x="{}" y="{anchor}" font-size="10" text-anchor="end">{y:.3}</text>"##, x0 + PAD - 4.0).unwrap();
    }
    for (x, anchor) in [(xmin, "start"), (xmax, "end")] {
        writeln!(
            out,
            r##"<text x="{}" y="{}" font-size="10" text-anchor="{anchor}">{x}</text>"##,
            sx(x),
            PANEL_H - PAD + 14.0
        )
        .unwrap();
    }
    for (i, s) in series.iter().enumerate() {
        let pts: Vec<String> = s.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        writeln!(
            out,
            r##"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"##,
            s.colour,
            pts.join(" ")
        )
        .unwrap();
        writeln!(
            out,
            r##"<text x="{}" y="{}" font-size="10" fill="{}">{}</text>"##,
            x0 + PANEL_W - PAD - 60.0,
            PAD + 14.0 + 12.0 * i as f64,
            s.colour,
            s.name
        )
        .unwrap();
    }
}

pub fn curves_svg(records: &[EpochRecord]) -> String {
    let pick = |f: fn(&EpochRecord) -> Option<f64>| -> Vec<(f64, f64)> {
        records.iter().filter_map(|r| f(r).map(|v| (r.epoch as f64, v))).collect()
    };
    let mut out = format!(
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{PANEL_H}" font-family="sans-serif">"##,
        2.0 * PANEL_W
    );
    out.push('\n');
    panel(
        &mut out,
        0.0,
        "loss",
        &[
            Series { name: "l_total", colour: "#1f77b4", points: pick(|r| Some(r.l_total)) },
            Series { name: "l_sim", colour: "#ff7f0e", points: pick(|r| Some(r.l_sim)) },
            Series { name: "l_clf", colour: "#2ca02c", points: pick(|r| Some(r.l_clf)) },
        ],
    );
    panel(
        &mut out,
        PANEL_W,
        "mAP",
        &[Series { name: "mAP", colour: "#d62728", points: pick(|r| r.map) }],
    );
    out.push_str("</svg>\n");
    out
}
