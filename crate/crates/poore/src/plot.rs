//! Static SVG histograms of IND vs OOD score distributions.

use std::fmt::Write as _;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 48.0;

/// Bin counts over `[lo, hi]`; the last bin is closed.
pub fn bin_counts(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<usize> {
    let mut counts = vec![0; bins];
    let span = hi - lo;
    for &v in values {
        let b = if span > 0.0 { (((v - lo) / span) * bins as f64) as usize } else { 0 };
        counts[b.min(bins - 1)] += 1;
    }
    counts
}

/// Overlaid density histograms (fraction of each set per bin) on shared bins.
pub fn histogram_svg(title: &str, ind: &[f64], ood: &[f64], bins: usize) -> String {
    let all = ind.iter().chain(ood);
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 1.0) };
    let frac = |v: &[f64]| -> Vec<f64> {
        let n = v.len().max(1) as f64;
        bin_counts(v, lo, hi, bins).into_iter().map(|c| c as f64 / n).collect()
    };
    let (fi, fo) = (frac(ind), frac(ood));
    let top = fi.iter().chain(&fo).copied().fold(0.0, f64::max).max(1e-12);
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let bar_w = plot_w / bins as f64;

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    )
    .unwrap();
    for (fracs, color) in [(&fi, "#1f77b4"), (&fo, "#ff7f0e")] {
        for (b, &f) in fracs.iter().enumerate() {
            if f == 0.0 {
                continue;
            }
            let h = f / top * plot_h;
            writeln!(
                s,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{color}" fill-opacity="0.5"/>"#,
                MARGIN + b as f64 * bar_w,
                HEIGHT - MARGIN - h,
                bar_w,
                h
            )
            .unwrap();
        }
    }
    let base = HEIGHT - MARGIN;
    writeln!(s, r#"<line x1="{MARGIN}" y1="{base}" x2="{}" y2="{base}" stroke="black"/>"#, WIDTH - MARGIN).unwrap();
    writeln!(s, r#"<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{base}" stroke="black"/>"#).unwrap();
    for (x, v, anchor) in [(MARGIN, lo, "start"), (WIDTH - MARGIN, hi, "end")] {
        writeln!(
            s,
            r#"<text x="{x}" y="{}" font-family="sans-serif" font-size="12" text-anchor="{anchor}">{v:.4}</text>"#,
            base + 18.0
        )
        .unwrap();
    }
    writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">score</text>"#,
        WIDTH / 2.0,
        base + 36.0
    )
    .unwrap();
    for (i, (label, color)) in [("IND", "#1f77b4"), ("OOD", "#ff7f0e")].into_iter().enumerate() {
        let y = MARGIN + 6.0 + 18.0 * i as f64;
        let x = WIDTH - MARGIN - 70.0;
        writeln!(s, r#"<rect x="{x}" y="{y}" width="12" height="12" fill="{color}" fill-opacity="0.5"/>"#).unwrap();
        writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12">{label} (n={})</text>"#,
            x + 16.0,
            y + 11.0,
            if i == 0 { ind.len() } else { ood.len() }
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bins_cover_both_ends() {
        assert_eq!(bin_counts(&[0.0, 0.5, 1.0], 0.0, 1.0, 2), vec![1, 2]);
        assert_eq!(bin_counts(&[3.0, 3.0], 3.0, 3.0, 4), vec![2, 0, 0, 0]);
    }

    #[test]
    fn svg_is_well_formed_enough() {
        let s = histogram_svg("a<b", &[0.1, 0.2], &[0.9], 5);
        assert!(s.starts_with("<svg") && s.ends_with("</svg>\n"));
        assert!(s.contains("a&lt;b"));
        assert_eq!(s, histogram_svg("a<b", &[0.1, 0.2], &[0.9], 5));
    }
}
